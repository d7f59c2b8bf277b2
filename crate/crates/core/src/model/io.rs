//! Parameter file: `"TAIM"`, version `u32`, hyperparameter count `u32` and
//! values `u32[]`, CRC-32 of the payload `u32`, then the payload: array count
//! `u32` followed per array by name length `u16`, UTF-8 name, rank `u8`, dims
//! `u32[]` and little-endian `f32` data. All integers little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::{ModelConfig, ModelError, ModelParams};
use crate::autodiff::{Real, Tensor};

const MAGIC: &[u8; 4] = b"TAIM";
pub const TAIM_VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CorruptFile(msg.into())
}

pub fn save_params<F: Real>(params: &ModelParams<F>, path: &Path) -> Result<(), ModelError> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in &params.tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| ModelError::ParamMismatch(format!("name `{name}` too long")))?;
        payload.extend_from_slice(&len.to_le_bytes());
        payload.extend_from_slice(bytes);
        payload.push(t.rank() as u8);
        for &d in t.shape() {
            payload.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let words = params.config.to_words();
    let mut out = Vec::with_capacity(payload.len() + 16 + 4 * words.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&TAIM_VERSION.to_le_bytes());
    out.extend_from_slice(&(words.len() as u32).to_le_bytes());
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    std::fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("file is truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads a parameter file, verifying magic, version, checksum and that the
/// arrays match the stored hyperparameters.
pub fn load_params<F: Real>(path: &Path) -> Result<ModelParams<F>, ModelError> {
    let bytes = std::fs::read(path)?;
    let mut c = Cursor { buf: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(corrupt("not a TAIM parameter file"));
    }
    let version = c.u32()?;
    if version != TAIM_VERSION {
        return Err(ModelError::VersionMismatch { found: version, expected: TAIM_VERSION });
    }
    let n_words = c.u32()? as usize;
    if n_words > 1024 {
        return Err(corrupt(format!("implausible hyperparameter count {n_words}")));
    }
    let words: Vec<u32> = (0..n_words).map(|_| c.u32()).collect::<Result<_, _>>()?;
    let crc = c.u32()?;
    let payload = &bytes[c.pos..];
    if crc32fast::hash(payload) != crc {
        return Err(corrupt("checksum mismatch"));
    }
    let config =
        ModelConfig::from_words(&words).ok_or_else(|| ModelError::ParamMismatch(format!("unrecognized hyperparameter block {words:?}")))?;

    let mut c = Cursor { buf: payload, pos: 0 };
    let count = c.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| corrupt("array name is not UTF-8"))?.to_string();
        let rank = c.take(1)?[0] as usize;
        let dims: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("array too large"))?;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| corrupt("array too large"))?)?;
        let data: Vec<F> = raw.chunks_exact(4).map(|b| F::from_f64_lossy(f64::from(f32::from_le_bytes(b.try_into().unwrap())))).collect();
        if tensors.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(corrupt(format!("duplicate array `{name}`")));
        }
    }
    if c.pos != payload.len() {
        return Err(corrupt("trailing bytes after the last array"));
    }
    let params = ModelParams { config, tensors };
    params.validate()?;
    Ok(params)
}
