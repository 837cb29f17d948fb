//! Binary checkpoints: `MFCK`, u32 version, u64 header length, a JSON header,
//! then every tensor as little-endian f64 in header order.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ParamStore;
use super::Tacotron;
use crate::error::{Error, Result};
use crate::featalign::atomic_write;

const MAGIC: &[u8; 4] = b"MFCK";
const VERSION: u32 = 1;

/// Adam moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl OptimizerState {
    pub fn zeros(params: &ParamStore) -> Self {
        let z: Vec<Array2<f64>> = params.values().iter().map(|p| Array2::zeros(p.dim())).collect();
        OptimizerState {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Tacotron,
    /// Training steps completed.
    pub step: u64,
    /// Phone inventory the embedding rows refer to.
    pub phones: Vec<String>,
    pub optimizer: Option<OptimizerState>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    phones: Vec<String>,
    optimizer_step: Option<u64>,
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(model: Tacotron, phones: Vec<String>) -> Self {
        Checkpoint {
            model,
            step: 0,
            phones,
            optimizer: None,
            meta: BTreeMap::new(),
        }
    }

    fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let store = &self.model.params;
        let mut out: Vec<(String, &Array2<f64>)> = store
            .names()
            .iter()
            .cloned()
            .zip(store.values())
            .collect();
        if let Some(opt) = &self.optimizer {
            for (name, (m, v)) in store.names().iter().zip(opt.m.iter().zip(&opt.v)) {
                out.push((format!("adam.m.{name}"), m));
                out.push((format!("adam.v.{name}"), v));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let header = Header {
            config: self.model.config.clone(),
            step: self.step,
            phones: self.phones.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            meta: self.meta.clone(),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::CorruptFile(format!("encoding checkpoint header: {e}")))?;
        let scalars: usize = tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * scalars);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut index = 0usize;
        for (_, t) in &tensors {
            for &v in t.iter() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue(index));
                }
                out.extend_from_slice(&v.to_le_bytes());
                index += 1;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptFile(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CorruptFile(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(corrupt("truncated checkpoint header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::CorruptFile(format!("checkpoint header: {e}")))?;
        let mut data = &body[hlen..];
        let mut tensors = BTreeMap::new();
        for entry in &header.tensors {
            let n = entry.rows * entry.cols;
            if data.len() < 8 * n {
                return Err(corrupt("truncated checkpoint data"));
            }
            let values: Vec<f64> = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            let t = Array2::from_shape_vec((entry.rows, entry.cols), values).expect("sized");
            tensors.insert(entry.name.clone(), t);
        }
        if !data.is_empty() {
            return Err(corrupt("trailing bytes after checkpoint data"));
        }

        let mut model = Tacotron::new(header.config, 0)?;
        let names: Vec<String> = model.params.names().to_vec();
        for (name, value) in names.iter().zip(model.params.values_mut()) {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::CorruptFile(format!("checkpoint lacks parameter {name}")))?;
            if t.dim() != value.dim() {
                return Err(Error::CorruptFile(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.dim(),
                    value.dim()
                )));
            }
            *value = t;
        }
        let optimizer = match header.optimizer_step {
            None => None,
            Some(step) => {
                let mut m = Vec::with_capacity(names.len());
                let mut v = Vec::with_capacity(names.len());
                for (name, p) in names.iter().zip(model.params.values()) {
                    for (prefix, dst) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
                        let key = format!("{prefix}{name}");
                        let t = tensors
                            .remove(&key)
                            .ok_or_else(|| Error::CorruptFile(format!("checkpoint lacks {key}")))?;
                        if t.dim() != p.dim() {
                            return Err(Error::CorruptFile(format!("{key} has the wrong shape")));
                        }
                        dst.push(t);
                    }
                }
                Some(OptimizerState { step, m, v })
            }
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::CorruptFile(format!("unexpected tensor {extra} in checkpoint")));
        }
        Ok(Checkpoint {
            model,
            step: header.step,
            phones: header.phones,
            optimizer,
            meta: header.meta,
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::MissingInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}
