//! Run manifests: what produced an artifact and from which inputs.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("NPPC_GIT_DESCRIBE"), ")");

pub struct Manifest {
    lines: Vec<(String, String)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// SHA-256 of a file, or of every file below a directory (relative path
/// and contents, in sorted order).
pub fn hash_path(path: &Path) -> io::Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        files_under(path, &mut files)?;
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0u8]);
            h.update(fs::read(&f)?);
        }
    } else {
        h.update(fs::read(path)?);
    }
    Ok(hex(&h.finalize()))
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        let mut m = Manifest { lines: Vec::new() };
        m.set("command", command);
        m.set("version", VERSION);
        if let Some(s) = seed {
            m.set("seed", s);
        }
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    pub fn input(&mut self, name: &str, path: &Path) -> io::Result<()> {
        let digest = hash_path(path)?;
        self.set(&format!("input.{name}"), format!("{} sha256:{digest}", path.display()));
        Ok(())
    }

    pub fn config(&mut self, text: &str) {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some((k, v)) = line.split_once('=') {
                self.set(&format!("config.{}", k.trim()), v.trim());
            }
        }
    }

    pub fn output(&mut self, path: &Path) -> io::Result<()> {
        let digest = hash_path(path)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.set(&format!("output.{name}"), format!("sha256:{digest}"));
        Ok(())
    }

    /// `<dir>/manifest.txt` for directory outputs, `<file>.manifest.txt`
    /// otherwise.
    pub fn write_for(&self, out: &Path) -> io::Result<PathBuf> {
        let path = if out.is_dir() {
            out.join("manifest.txt")
        } else {
            let mut s = out.as_os_str().to_owned();
            s.push(".manifest.txt");
            PathBuf::from(s)
        };
        let text: String = self.lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        fs::write(&path, text)?;
        Ok(path)
    }
}
