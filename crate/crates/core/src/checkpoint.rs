//! Checkpoint file format: a JSON header (format version, model config,
//! tokenizer hash, training metadata, and a name -> (offset, shape) tensor
//! table) followed by raw little-endian f32 tensor payloads. Save/load
//! round-trips are bit-exact.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Matrix;
use crate::training::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DLMCHK01";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub format_version: u32,
    pub train_config: TrainConfig,
    pub total_steps: u64,
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
}

/// A trained model plus everything needed to reload and evaluate it.
/// `extras` holds auxiliary tensors such as a fine-tuned classifier head.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub tokenizer_hash: String,
    pub meta: TrainMeta,
    pub extras: Vec<(String, Matrix<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tokenizer_hash: String,
    meta: TrainMeta,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Serializes to the container format in memory.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        {
            let mut push = |name: &str, shape: &[usize], data: &[f32]| {
                entries.push(TensorEntry {
                    name: name.to_string(),
                    offset: payload.len() as u64,
                    shape: shape.to_vec(),
                });
                for v in data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            };
            self.params
                .for_each_tensor(|name, shape, data| push(name, shape, data));
            for (name, m) in &self.extras {
                push(&format!("extras.{name}"), &[m.rows, m.cols], &m.data);
            }
        }
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            tokenizer_hash: self.tokenizer_hash.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + 8 + header_bytes.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + header_len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}",
                header.format_version
            )));
        }
        header.config.validate()?;
        let payload = &bytes[16 + header_len..];

        let mut params = ModelParams::<f32>::zeros(&header.config);
        let mut slots: HashMap<String, &mut [f32]> = params
            .named_tensors_mut()
            .into_iter()
            .collect();
        let mut extras = Vec::new();
        let mut filled = 0usize;
        for entry in &header.tensors {
            let len: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + len * 4;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} overruns the payload",
                    entry.name
                )));
            }
            let raw = &payload[start..end];
            if let Some(slot) = slots.remove(&entry.name) {
                if slot.len() != len {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} has shape {:?}, expected {} values",
                        entry.name,
                        entry.shape,
                        slot.len()
                    )));
                }
                for (i, v) in slot.iter_mut().enumerate() {
                    *v = f32::from_le_bytes(raw[i * 4..i * 4 + 4].try_into().unwrap());
                }
                filled += 1;
            } else if let Some(name) = entry.name.strip_prefix("extras.") {
                if entry.shape.len() != 2 {
                    return Err(Error::Checkpoint(format!(
                        "extra tensor {name} must be two-dimensional"
                    )));
                }
                let data: Vec<f32> = (0..len)
                    .map(|i| f32::from_le_bytes(raw[i * 4..i * 4 + 4].try_into().unwrap()))
                    .collect();
                extras.push((
                    name.to_string(),
                    Matrix::from_vec(entry.shape[0], entry.shape[1], data),
                ));
            } else {
                return Err(Error::Checkpoint(format!(
                    "unexpected tensor {} in checkpoint",
                    entry.name
                )));
            }
        }
        if !slots.is_empty() {
            let missing: Vec<&String> = slots.keys().collect();
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing {filled}-tensor model slots: {missing:?}"
            )));
        }
        Ok(Checkpoint {
            config: header.config,
            params,
            tokenizer_hash: header.tokenizer_hash,
            meta: header.meta,
            extras,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized form; used as the checkpoint id in
    /// evaluation reports and run manifests.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
