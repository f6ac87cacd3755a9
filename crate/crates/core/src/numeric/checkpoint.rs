//! Versioned binary tensor container shared by backbone and adapter checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "FCLTNSR1"
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON
//! count        u32
//! count x {
//!   name_len   u16
//!   name       name_len bytes UTF-8
//!   rows       u32
//!   cols       u32
//!   data       rows*cols IEEE-754 f64, row-major
//! }
//! digest       32 bytes  SHA-256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FCLTNSR1";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl TensorFile {
    pub fn new(header: serde_json::Value) -> Self {
        Self { header, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::Format(format!("tensor name too long: {name}")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("digest mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let hlen = r.u32()? as usize;
        let header = serde_json::from_slice(r.take(hlen)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|e| Error::Format(format!("tensor name: {e}")))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        let mut f = TensorFile::new(serde_json::json!({"kind": "test", "n": 2}));
        f.push("a", Matrix::from_rows(&[&[1.0, -0.0], &[f64::MIN_POSITIVE, 1e300]]));
        f.push("b", Matrix::row_vector(&[std::f64::consts::PI]));
        f
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        let g = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(g.header, f.header);
        for ((na, ma), (nb, mb)) in f.tensors.iter().zip(&g.tensors) {
            assert_eq!(na, nb);
            let xa: Vec<u64> = ma.data().iter().map(|v| v.to_bits()).collect();
            let xb: Vec<u64> = mb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xa, xb);
        }
        assert_eq!(g.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(TensorFile::from_bytes(&bytes).is_err());
        assert!(TensorFile::from_bytes(b"nonsense").is_err());
    }
}
