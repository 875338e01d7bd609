//! Versioned binary container shared by every trained model.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "PSIMCKPT"
//! version      u32
//! kind         4 bytes  model tag, e.g. "RSNR"
//! seed         u64
//! config_hash  32 bytes SHA-256 of the producing config (zeros if none)
//! n_meta       u32, then n_meta x u64   model shape (hidden size first)
//! n_arrays     u32, then per array:
//!              name_len u16, name (utf-8), len u64, len x f64
//! ```

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PSIMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: [u8; 4],
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub meta: Vec<u64>,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: &[u8; 4], seed: u64) -> Self {
        Self {
            kind: *kind,
            seed,
            config_hash: [0; 32],
            meta: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn with_meta(mut self, meta: Vec<u64>) -> Self {
        self.meta = meta;
        self
    }

    pub fn with_config_hash(mut self, hash: [u8; 32]) -> Self {
        self.config_hash = hash;
        self
    }

    pub fn push_array(&mut self, name: &str, values: Vec<f64>) {
        self.arrays.push((name.to_string(), values));
    }

    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.arrays.iter().map(|(n, v)| 10 + n.len() + 8 * v.len()).sum();
        let mut out = Vec::with_capacity(64 + 8 * self.meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for m in &self.meta {
            out.extend_from_slice(&m.to_le_bytes());
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, values) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let kind: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let seed = r.u64()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let n_meta = r.u32()? as usize;
        let meta = (0..n_meta).map(|_| r.u64()).collect::<std::result::Result<_, _>>()?;
        let n_arrays = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| e.to_string())?
                .to_string();
            let n = r.u64()? as usize;
            let raw = r.take(n.checked_mul(8).ok_or("array length overflow")?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name, values));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self {
            kind,
            seed,
            config_hash,
            meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }

    /// Reads and checks the model tag.
    pub fn read_kind(path: &Path, kind: &[u8; 4]) -> Result<Self> {
        let ck = Self::read(path)?;
        if &ck.kind != kind {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!(
                    "expected {:?} model, found {:?}",
                    String::from_utf8_lossy(kind),
                    String::from_utf8_lossy(&ck.kind)
                ),
            });
        }
        Ok(ck)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).ok_or("length overflow")?;
        let s = self.bytes.get(self.pos..end).ok_or("truncated file")?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let ck = Checkpoint::new(b"RSNR", 7).with_meta(vec![256]);
        let b = ck.to_bytes();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(&b[12..16], b"RSNR");
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(b[60..68].try_into().unwrap()), 256);
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new(b"RSNR", 1);
        ck.push_array("w", vec![1.0, 2.0]);
        let b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = b;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn round_trips(
            seed in any::<u64>(),
            meta in prop::collection::vec(any::<u64>(), 0..4),
            arrays in prop::collection::vec(
                ("[a-z_]{1,12}", prop::collection::vec(any::<f64>(), 0..20)), 0..4),
        ) {
            let mut ck = Checkpoint::new(b"TEST", seed).with_meta(meta);
            ck.config_hash[3] = 9;
            for (n, v) in arrays {
                ck.push_array(&n, v);
            }
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            // compare bit patterns so NaN payloads count as equal
            prop_assert_eq!(back.to_bytes(), ck.to_bytes());
        }
    }
}
