//! The `VPUF` checkpoint format.
//!
//! ```text
//! "VPUF" | version: u16 LE | header_len: u32 LE | header JSON
//!        | tensor data, f32 LE | SHA-256 of everything before it (32 bytes)
//! ```
//!
//! The header holds the model configuration and one `{name, shape, offset}`
//! record per tensor, `offset` counted in bytes from the start of the data
//! block. Weights produced by training are already `f32`-exact, so a
//! save/load round trip is lossless.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vpu_core::model::{ModelConfig, ModelParams};
use vpu_core::Tensor;

use crate::error::{AppError, CheckpointError, Result};

pub const MAGIC: &[u8; 4] = b"VPUF";
pub const VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    tensors: Vec<TensorRecord>,
}

/// Serialises `params` (values rounded to `f32`) with their config.
pub fn encode(params: &ModelParams, cfg: &ModelConfig) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut data = Vec::with_capacity(params.total_values() * 4);
    for (name, t) in params.entries() {
        tensors.push(TensorRecord { name: name.clone(), shape: t.shape().to_vec(), offset: data.len() });
        for &v in t.data() {
            data.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header { model: cfg.clone(), tensors }).expect("header serialises");
    let mut out = Vec::with_capacity(10 + header.len() + data.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, ModelConfig), CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 10 {
        return Err(CheckpointError::Truncated);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let data_start = 10usize.checked_add(header_len).ok_or(CheckpointError::Truncated)?;
    if bytes.len() < data_start + DIGEST_LEN {
        return Err(CheckpointError::Truncated);
    }
    let header: Header = serde_json::from_slice(&bytes[10..data_start])
        .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    let data_len: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
    let body_end = data_start + data_len;
    if bytes.len() < body_end + DIGEST_LEN {
        return Err(CheckpointError::Truncated);
    }
    if bytes.len() > body_end + DIGEST_LEN {
        return Err(CheckpointError::Malformed("trailing bytes after digest".into()));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(CheckpointError::DigestMismatch);
    }
    let data = &bytes[data_start..body_end];
    let mut entries = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0;
    for rec in &header.tensors {
        let n: usize = rec.shape.iter().product();
        if rec.offset != expected_offset {
            return Err(CheckpointError::Malformed(format!("tensor {} at offset {}", rec.name, rec.offset)));
        }
        let values: Vec<f64> = data[rec.offset..rec.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(rec.shape.clone(), values).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        entries.push((rec.name.clone(), t));
        expected_offset += 4 * n;
    }
    let params = ModelParams::from_entries(entries, &header.model).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok((params, header.model))
}

pub fn save(path: &Path, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    fs::write(path, encode(params, cfg)).map_err(|e| AppError::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(&bytes).map_err(|source| AppError::Checkpoint { path: path.into(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ModelParams, ModelConfig) {
        let cfg = ModelConfig::miniature();
        (ModelParams::init(&cfg, 4).unwrap(), cfg)
    }

    #[test]
    fn round_trip_is_exact() {
        let (p, c) = sample();
        let bytes = encode(&p, &c);
        let (q, c2) = decode(&bytes).unwrap();
        assert_eq!((q.clone(), c2.clone()), (p, c));
        assert_eq!(encode(&q, &c2), bytes);
    }

    #[test]
    fn rejects_damage() {
        let (p, c) = sample();
        let bytes = encode(&p, &c);
        assert_eq!(decode(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated));
        assert_eq!(decode(&bytes[..7]), Err(CheckpointError::Truncated));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad), Err(CheckpointError::BadMagic));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(decode(&bad), Err(CheckpointError::UnsupportedVersion(9)));
        let mut bad = bytes.clone();
        let mid = bytes.len() - 40;
        bad[mid] ^= 1;
        assert_eq!(decode(&bad), Err(CheckpointError::DigestMismatch));
    }
}
