//! Flat binary container for checkpoints and the tail-latent cache.
//!
//! ```text
//! magic      8 bytes  "EVOEDIT\0"
//! version    u32      1
//! meta_len   u32      followed by meta_len bytes of UTF-8 JSON
//! count      u32      number of records
//! record * count:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims as u64 * ndim
//!   dtype    u8       0 = f32, 1 = f64
//!   digest   8 bytes  first 8 bytes of SHA-256 over the value bytes
//!   values   f32 or f64 * prod(dims)
//! ```
//!
//! All integers and floats are little-endian. Checkpoints use `f32`
//! records (a round trip rounds to `f32`); caches that must reproduce an
//! online computation bit for bit use `f64`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EVOEDIT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    /// Free-form JSON (configs, normalization stats, provenance).
    pub meta: serde_json::Value,
    pub records: Vec<(String, Tensor)>,
    /// Names of records stored at full `f64` precision.
    wide: std::collections::BTreeSet<String>,
}

/// Rounds every value to `f32` precision, i.e. what a save/load round trip yields.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

fn digest(bytes: &[u8]) -> [u8; 8] {
    let d = Sha256::digest(bytes);
    let mut out = [0; 8];
    out.copy_from_slice(&d[..8]);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            records: Vec::new(),
            wide: Default::default(),
        }
    }

    /// Adds a record stored as `f32`.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.records.push((name.into(), value));
    }

    /// Adds a record stored as `f64` (exact round trip).
    pub fn push_f64(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.wide.insert(name.clone());
        self.records.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.meta.to_string();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let values: Vec<u8> = if self.wide.contains(name) {
                out.push(1);
                t.data().iter().flat_map(|&v| v.to_le_bytes()).collect()
            } else {
                out.push(0);
                t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
            };
            out.extend_from_slice(&digest(&values));
            out.extend_from_slice(&values);
        }
        out
    }

    /// Parses a container. Structural problems are [`Error::Format`]; a
    /// record whose values do not match its digest is [`Error::CacheIntegrity`].
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let meta: serde_json::Value =
            serde_json::from_str(&r.string()?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        let mut wide = std::collections::BTreeSet::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Format(format!("record {name:?}: {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let width = match r.take(1)?[0] {
                0 => 4,
                1 => 8,
                d => return Err(Error::Format(format!("record {name:?}: unknown dtype {d}"))),
            };
            let want: [u8; 8] = r.take(8)?.try_into().unwrap();
            let bytes = r.take(n.checked_mul(width).ok_or_else(|| Error::Format("record too large".into()))?)?;
            if digest(bytes) != want {
                return Err(Error::CacheIntegrity(format!("record {name:?} fails its checksum")));
            }
            let data = if width == 8 {
                wide.insert(name.clone());
                bytes.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            } else {
                bytes.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
            };
            records.push((name, Tensor::new(&shape, data)));
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { meta, records, wide })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(serde_json::json!({"kind": "test"}));
        c.push("a", Tensor::new(&[2, 3], vec![0.1, 0.2, 0.3, -1.0, 2.5, 1e-3]));
        c.push("b.scalar", Tensor::scalar(7.0));
        c.push_f64("exact", Tensor::new(&[2], vec![0.1, 1.0 / 3.0]));
        c
    }

    #[test]
    fn round_trip_rounds_to_f32() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.meta, c.meta);
        for ((n1, t1), (n2, t2)) in c.records.iter().zip(&back.records) {
            assert_eq!(n1, n2);
            if n1 == "exact" {
                assert_eq!(t1, t2);
            } else {
                assert_eq!(&quantize(t1), t2);
            }
        }
        // A second round trip is exact.
        assert_eq!(Container::from_bytes(&back.to_bytes()).unwrap(), back);
    }

    #[test]
    fn detects_corruption() {
        let mut bytes = sample().to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::CacheIntegrity(_))));
        let mut bad = sample().to_bytes();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format(_))));
        let short = &sample().to_bytes()[..20];
        assert!(matches!(Container::from_bytes(short), Err(Error::Format(_))));
    }
}
