//! Binary parameter file.
//!
//! ```text
//! magic    8 bytes   "GPNPARAM"
//! version  u32 LE    1
//! count    u32 LE    number of tensors
//! repeated count times:
//!   name_len u32 LE, name (UTF-8)
//!   rows u32 LE, cols u32 LE
//!   rows*cols f64 LE values, row-major
//! ```
//!
//! Tensors may appear in any order but every name in
//! [`PARAM_NAMES`](crate::model::PARAM_NAMES) must be present exactly once.

use std::path::Path;

use thiserror::Error;

use crate::compute::Tensor;
use crate::model::{ModelParams, PARAM_NAMES};

pub const MAGIC: &[u8; 8] = b"GPNPARAM";
pub const VERSION: u32 = 1;

/// Upper bound on names, which are short identifiers.
const MAX_NAME_LEN: usize = 256;

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("not a parameter file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported parameter file version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("unknown tensor '{0}'")]
    UnknownTensor(String),
    #[error("tensor '{0}' appears twice")]
    DuplicateTensor(String),
    #[error("tensor '{0}' is missing")]
    MissingTensor(&'static str),
    #[error("tensor '{0}' contains non-finite values")]
    NonFinite(String),
    #[error("inconsistent shapes: {0}")]
    Shape(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub fn encode(params: &ModelParams<f64>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(PARAM_NAMES.len() as u32).to_le_bytes());
    for (name, t) in PARAM_NAMES.iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ParamsError> {
        if self.buf.len() < n {
            return Err(ParamsError::Truncated(what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ParamsError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams<f64>, ParamsError> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(ParamsError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(ParamsError::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")? as usize;
    let mut slots: [Option<Tensor<f64>>; 8] = Default::default();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        if name_len > MAX_NAME_LEN {
            return Err(ParamsError::Truncated("name"));
        }
        let name = std::str::from_utf8(r.take(name_len, "name")?).map_err(|_| ParamsError::BadName)?;
        let slot = PARAM_NAMES
            .iter()
            .position(|&n| n == name)
            .ok_or_else(|| ParamsError::UnknownTensor(name.to_string()))?;
        if slots[slot].is_some() {
            return Err(ParamsError::DuplicateTensor(name.to_string()));
        }
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let n_bytes = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or(ParamsError::Truncated("values"))?;
        let raw = r.take(n_bytes, "values")?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ParamsError::NonFinite(name.to_string()));
        }
        slots[slot] = Some(Tensor::from_vec(rows, cols, values).expect("length checked"));
    }
    if !r.buf.is_empty() {
        return Err(ParamsError::TrailingBytes(r.buf.len()));
    }
    let mut tensors = Vec::with_capacity(8);
    for (slot, name) in slots.into_iter().zip(PARAM_NAMES) {
        tensors.push(slot.ok_or(ParamsError::MissingTensor(name))?);
    }
    let tensors: [Tensor<f64>; 8] = tensors.try_into().expect("eight tensors");
    ModelParams::from_tensors(tensors).map_err(|e| ParamsError::Shape(e.to_string()))
}

pub fn save(path: &Path, params: &ModelParams<f64>) -> Result<(), ParamsError> {
    std::fs::write(path, encode(params)).map_err(|source| ParamsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<ModelParams<f64>, ParamsError> {
    let bytes = std::fs::read(path).map_err(|source| ParamsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> ModelParams<f64> {
        ModelParams::init(7, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn round_trip() {
        let p = params();
        let bytes = encode(&p);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(decode(&bytes).unwrap(), p);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&params());
        assert!(matches!(decode(b"NOTPARAMxxxx"), Err(ParamsError::BadMagic)));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(ParamsError::Truncated(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(ParamsError::TrailingBytes(1))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode(&v2), Err(ParamsError::UnsupportedVersion(2))));
        // drop the last tensor from the count
        let mut short = bytes.clone();
        short[12] = 7;
        assert!(decode(&short).is_err());
    }

    #[test]
    fn rejects_huge_dimensions_without_allocating() {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        let name = b"encoder.w0";
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name);
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode(&b), Err(ParamsError::Truncated("values"))));
    }
}
