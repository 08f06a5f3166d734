//! Binary checkpoints: magic, little-endian `u32` header length, JSON header,
//! then every parameter as little-endian `f64` in storage order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ToyConfig;
use super::model::{ModelDims, ToyModelParams};
use super::{Result, ToyError};

pub const MAGIC: &[u8; 8] = b"TOGGLCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset in values from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dims: ModelDims,
    pub vocab: usize,
    pub feature_dim: usize,
    pub config: ToyConfig,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ToyModelParams,
    pub config: ToyConfig,
}

fn corrupt(msg: impl Into<String>) -> ToyError {
    ToyError::Checkpoint(msg.into())
}

pub fn to_bytes(params: &ToyModelParams, config: &ToyConfig) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        dims: params.dims.clone(),
        vocab: params.vocab,
        feature_dim: params.feature_dim,
        config: config.clone(),
        config_hash: config.hash(),
        tensors: params
            .layout()
            .tensors()
            .map(|(name, shape, range)| TensorEntry {
                name: name.to_string(),
                shape,
                offset: range.start,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    let header_len = u32::try_from(json.len()).map_err(|_| corrupt("header too large"))?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * params.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for x in &params.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes")) as usize;
    let body = bytes.get(12..12 + header_len).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| corrupt(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported version {}", header.version)));
    }
    if header.config_hash != header.config.hash() {
        return Err(corrupt("config hash mismatch"));
    }
    let data_bytes = &bytes[12 + header_len..];
    if !data_bytes.len().is_multiple_of(8) {
        return Err(corrupt("data section is not a whole number of f64 values"));
    }
    let data: Vec<f64> = data_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    let params = ToyModelParams::from_data(&header.dims, header.vocab, header.feature_dim, data)?;
    let expected: Vec<TensorEntry> = params
        .layout()
        .tensors()
        .map(|(name, shape, range)| TensorEntry {
            name: name.to_string(),
            shape,
            offset: range.start,
        })
        .collect();
    if expected != header.tensors {
        return Err(corrupt("tensor table does not match the model dimensions"));
    }
    Ok(Checkpoint {
        params,
        config: header.config,
    })
}

pub fn save_checkpoint(path: &Path, params: &ToyModelParams, config: &ToyConfig) -> Result<()> {
    std::fs::write(path, to_bytes(params, config)?).map_err(|source| ToyError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| ToyError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::train::initial_params;

    fn small() -> (ToyModelParams, ToyConfig) {
        let mut config = ToyConfig::default();
        config.model.hidden = 6;
        config.model.embed = 4;
        (initial_params(&config).unwrap(), config)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (params, config) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, &config).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.config, config);
        assert_eq!(std::fs::read(&path).unwrap(), to_bytes(&params, &config).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let (params, config) = small();
        let bytes = to_bytes(&params, &config).unwrap();
        assert!(from_bytes(&bytes[..4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_checkpoint(Path::new("/nonexistent/x.ckpt")), Err(ToyError::Io { .. })));
    }
}
