//! Flat `key = value` text used for config files and checkpoint metadata.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `key = value` lines. `#` starts a comment; blank lines are ignored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, found `{line}`", no + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", no + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`"))),
        }
    }

    /// Overwrites `*slot` when `key` is present.
    pub fn update<V: FromStr>(&self, key: &str, slot: &mut V) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Fails on the first key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = KeyValues::parse("# c\n a = 1 \n\nb=x # tail\n").unwrap();
        assert_eq!(kv.get::<u32>("a").unwrap(), Some(1));
        assert_eq!(kv.get_str("b"), Some("x"));
        assert_eq!(kv.get::<u32>("missing").unwrap(), None);
    }

    #[test]
    fn errors() {
        assert!(KeyValues::parse("novalue").is_err());
        assert!(KeyValues::parse("a=1\na=2").is_err());
        let kv = KeyValues::parse("a=x").unwrap();
        assert!(kv.get::<u32>("a").is_err());
        assert!(kv.reject_unknown(&["b"]).is_err());
        assert!(kv.reject_unknown(&["a"]).is_ok());
    }

    #[test]
    fn text_round_trip() {
        let mut kv = KeyValues::default();
        kv.set("beta", 0.5);
        kv.set("seed", 7);
        assert_eq!(KeyValues::parse(&kv.to_text()).unwrap(), kv);
    }
}
