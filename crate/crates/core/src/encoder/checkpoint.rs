//! Versioned binary checkpoint: magic, JSON header describing named
//! tensors, then little-endian f64 payload in header order.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndkernel::Tensor;

use super::{EncoderConfig, EncoderParams, ParamGroup, ParamSet};

pub const MAGIC: &[u8; 4] = b"DENC";
pub const VERSION: u32 = 1;

/// Hard cap on the header so corrupt length fields cannot trigger huge
/// allocations while parsing untrusted bytes.
const MAX_HEADER_BYTES: u64 = 16 * 1024 * 1024;
const MAX_TENSOR_VALUES: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes, not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint header: {0}")]
    BadHeader(String),
    #[error("tensor {name} has inconsistent shape {rows}x{cols}")]
    BadShape { name: String, rows: u64, cols: u64 },
    #[error("non-finite value in tensor {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    group: String,
    name: String,
    rows: u64,
    cols: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    tensors: Vec<TensorMeta>,
}

/// A checkpoint on disk: config, encoder parameters and optionally the
/// query-side gate parameters (stored under the `gate` group).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: EncoderParams,
    pub gate: Option<ParamSet>,
}

impl Checkpoint {
    pub fn new(config: EncoderConfig, params: EncoderParams) -> Self {
        Checkpoint { config, params, gate: None }
    }

    pub fn with_gate(mut self, gate: ParamSet) -> Self {
        self.gate = Some(gate);
        self
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let mut tensors = Vec::new();
        let mut payload: Vec<&Tensor> = Vec::new();
        for (group, name, tensor) in self.params.iter() {
            tensors.push(TensorMeta {
                group: group.as_str().to_string(),
                name: name.to_string(),
                rows: tensor.rows() as u64,
                cols: tensor.cols() as u64,
            });
            payload.push(tensor);
        }
        if let Some(gate) = &self.gate {
            for (name, tensor) in gate.iter() {
                tensors.push(TensorMeta {
                    group: "gate".to_string(),
                    name: name.to_string(),
                    rows: tensor.rows() as u64,
                    cols: tensor.cols() as u64,
                });
                payload.push(tensor);
            }
        }
        let header = Header { config: self.config.clone(), tensors };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
        w.write_all(&header_bytes)?;
        for tensor in payload {
            for &v in tensor.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let header_len = r.read_u64::<LittleEndian>()?;
        if header_len > MAX_HEADER_BYTES {
            return Err(CheckpointError::BadHeader(format!("header length {header_len} too large")));
        }
        let mut header_bytes = vec![0u8; header_len as usize];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

        let mut params = EncoderParams::default();
        let mut gate: Option<ParamSet> = None;
        for meta in &header.tensors {
            let values = meta.rows.checked_mul(meta.cols).filter(|&n| n <= MAX_TENSOR_VALUES).ok_or(
                CheckpointError::BadShape { name: meta.name.clone(), rows: meta.rows, cols: meta.cols },
            )?;
            let mut data = vec![0.0f64; values as usize];
            for v in data.iter_mut() {
                *v = r.read_f64::<LittleEndian>()?;
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::NonFinite(meta.name.clone()));
            }
            let tensor = Tensor::new(meta.rows as usize, meta.cols as usize, data)
                .map_err(|_| CheckpointError::BadShape {
                    name: meta.name.clone(),
                    rows: meta.rows,
                    cols: meta.cols,
                })?;
            match meta.group.as_str() {
                "gate" => gate.get_or_insert_with(ParamSet::new).insert(&meta.name, tensor),
                g => {
                    let group = ParamGroup::parse(g).ok_or_else(|| {
                        CheckpointError::BadHeader(format!("unknown parameter group {g:?}"))
                    })?;
                    params.group_mut(group).insert(&meta.name, tensor);
                }
            }
        }
        header.config.validate().map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
        Ok(Checkpoint { config: header.config, params, gate })
    }

    pub fn save_to(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.save(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_from(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Checkpoint::load(bytes.as_slice())
    }
}
