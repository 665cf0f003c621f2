//! Binary weights file: the 8-byte magic `FEDW0001`, the dimension as a
//! little-endian `u64`, then that many little-endian IEEE-754 doubles.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamVector;

pub const MAGIC: &[u8; 8] = b"FEDW0001";
const HEADER_LEN: usize = 16;

pub fn encode(w: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * w.dim());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(w.dim() as u64).to_le_bytes());
    for v in w.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ParamVector> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::WeightsFormat(format!(
            "truncated header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::WeightsFormat("bad magic".into()));
    }
    let dim = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_LEN..];
    if (body.len() as u64) != dim.saturating_mul(8) {
        return Err(Error::WeightsFormat(format!(
            "header says {dim} values but body holds {} bytes",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ParamVector::new(values)
}

pub fn save_weights(path: impl AsRef<Path>, w: &ParamVector) -> Result<()> {
    fs::write(path, encode(w))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamVector> {
    decode(&fs::read(path)?)
}

/// Loads and checks the dimension against what the model expects.
pub fn load_weights_for(path: impl AsRef<Path>, expected_dim: usize) -> Result<ParamVector> {
    let w = load_weights(path)?;
    if w.dim() != expected_dim {
        return Err(Error::WeightsFormat(format!(
            "file holds {} parameters, model expects {expected_dim}",
            w.dim()
        )));
    }
    Ok(w)
}
