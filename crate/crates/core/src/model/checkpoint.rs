//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic, a little-endian `u64` header length, a JSON
//! header (config, lineage, tensor names and shapes), then every tensor's
//! data as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{layout, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

const MAGIC: &[u8; 8] = b"PHVTCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    lineage: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Parameters plus free-form provenance (seeds, epoch, design).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub lineage: serde_json::Value,
}

pub fn encode_checkpoint(params: &ModelParams, lineage: &serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        config: params.config.clone(),
        lineage: lineage.clone(),
        tensors: params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + params.census() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &params.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    header.config.validate()?;

    let expected = layout(&header.config);
    if expected.len() != header.tensors.len()
        || expected.iter().zip(&header.tensors).any(|(e, t)| e.0 != t.name || e.1 != t.shape)
    {
        return Err(bad("tensor list does not match the stored config"));
    }

    let mut data = bytes[16 + header_len..].chunks_exact(8);
    let mut names = Vec::with_capacity(header.tensors.len());
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let values: Vec<f64> = data
            .by_ref()
            .take(numel)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.len() != numel {
            return Err(bad("truncated tensor data"));
        }
        tensors.push(Tensor::new(entry.shape, values)?);
        names.push(entry.name);
    }
    if data.next().is_some() || !data.remainder().is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        params: ModelParams { config: header.config, names, tensors },
        lineage: header.lineage,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams, lineage: &serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params, lineage)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig { d_model: 8, layers: 1, heads: 2, mlp_width: 8, ..ModelConfig::new(3, 6, 2) };
        let params = ModelParams::init(&cfg, 9).unwrap();
        let lineage = serde_json::json!({ "init_seed": 9 });
        let bytes = encode_checkpoint(&params, &lineage).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.lineage, lineage);

        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(decode_checkpoint(&corrupt).is_err());
    }
}
