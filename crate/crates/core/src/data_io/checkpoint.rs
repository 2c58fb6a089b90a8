//! `NPPC` parameter container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "NPPC" version
//! kind_len kind_utf8
//! config_len config_utf8
//! record_count
//! record*: name_len name_utf8 ndims dim* f32_le*
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NPPC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Module kind tag: `npp`, `proxy`, `classifier`, ...
    pub kind: String,
    /// Free-form configuration text, conventionally `key=value` lines.
    pub config: String,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: impl Into<String>, params: ParamSet) -> Self {
        Checkpoint { kind: kind.into(), config: config.into(), params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.params.scalar_count());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.config);
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::CorruptCheckpoint("file shorter than header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::IncompatibleCheckpoint(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::IncompatibleCheckpoint(format!("version {version}, expected {VERSION}")));
        }
        let kind = r.string()?;
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndims = r.u32()? as usize;
            let dims = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("shape overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            params
                .insert(name.clone(), Tensor::new(dims, data))
                .map_err(|_| Error::CorruptCheckpoint(format!("duplicate parameter {name}")))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { kind, config, params })
    }

    /// Fails unless the stored kind tag equals `kind`.
    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::IncompatibleCheckpoint(format!("expected kind {kind}, found {}", self.kind)));
        }
        Ok(self)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::CorruptCheckpoint("invalid utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_param() -> Checkpoint {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, -2.5])).unwrap();
        Checkpoint::new("npp", "base_channels=8\n", p)
    }

    #[test]
    fn save_then_load_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.nppc");
        let ck = one_param();
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params.get("w").unwrap().data()[1].to_bits(), (-2.5f32).to_bits());
        assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn wrong_magic_is_incompatible() {
        let mut bytes = one_param().to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::IncompatibleCheckpoint(_))));
        let mut bytes = one_param().to_bytes();
        bytes[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::IncompatibleCheckpoint(_))));
    }

    #[test]
    fn truncation_is_corrupt() {
        let bytes = one_param().to_bytes();
        for cut in [6, 12, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn names_and_shapes_keep_saved_order() {
        let mut p = ParamSet::new();
        p.insert("zeta", Tensor::new(vec![1, 2], vec![1.0, 2.0])).unwrap();
        p.insert("alpha", Tensor::new(vec![3], vec![0.0; 3])).unwrap();
        let back = Checkpoint::from_bytes(&Checkpoint::new("proxy", "", p).to_bytes()).unwrap();
        let names: Vec<_> = back.params.names().collect();
        assert_eq!(names, ["zeta", "alpha"]);
        assert_eq!(back.params.get("zeta").unwrap().shape(), &[1, 2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_preserves_bits(
            records in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 0..3), proptest::collection::vec(any::<u32>(), 27)),
                0..5,
            ),
            config in ".{0,40}",
        ) {
            let mut p = ParamSet::new();
            for (i, (dims, bits)) in records.iter().enumerate() {
                let n: usize = dims.iter().product();
                let data = bits[..n].iter().map(|&b| f32::from_bits(b)).collect();
                p.insert(format!("p{i}"), Tensor::new(dims.clone(), data)).unwrap();
            }
            let ck = Checkpoint::new("classifier", config, p);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert!(back.params.bits_eq(&ck.params));
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
