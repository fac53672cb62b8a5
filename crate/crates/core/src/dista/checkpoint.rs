//! Checkpoint file: a magic line, a little-endian `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use cso_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::network::{param_name, ModelConfig, StageParams, STAGE_PARAM_NAMES};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

const MAGIC: &[u8] = b"CSO-UNMIX-CHECKPOINT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Identity-constraint term alone on the validation split.
    pub val_constraint: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Fingerprint of the steering matrix the model was trained against.
    pub fingerprint: String,
    /// High-resolution grid width and height.
    pub grid: (usize, usize),
    pub q_init: DenseMatrix,
    pub stages: Vec<StageParams>,
    pub trace: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    fingerprint: String,
    grid: (usize, usize),
    rng_seed: u64,
    trace: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Named tensors in blob order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (k, s) in self.stages.iter().enumerate() {
            for (name, t) in STAGE_PARAM_NAMES.iter().zip(s.tensors()) {
                out.push((param_name(k, name), t));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = vec![TensorEntry {
            name: "Q_init".into(),
            shape: vec![self.q_init.rows(), self.q_init.cols()],
        }];
        let named = self.named_tensors();
        tensors.extend(named.iter().map(|(n, t)| TensorEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        }));
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            fingerprint: self.fingerprint.clone(),
            grid: self.grid,
            rng_seed: self.config.rng_seed,
            trace: self.trace.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.q_init.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (_, t) in named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|detail| Error::format(path, detail))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let rest = bytes.strip_prefix(MAGIC).ok_or("not a checkpoint file")?;
        if rest.len() < 8 {
            return Err("truncated header length".into());
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < hlen {
            return Err("truncated header".into());
        }
        let header: Header = serde_json::from_slice(&rest[..hlen]).map_err(|e| e.to_string())?;
        if header.version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {}", header.version));
        }
        let blob = &rest[hlen..];
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if blob.len() != total * 8 {
            return Err(format!("blob has {} bytes, header describes {}", blob.len(), total * 8));
        }
        let mut values = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |n: usize| values.by_ref().take(n).collect::<Vec<f64>>();
        let mut entries = header.tensors.iter();
        let q_entry = entries.next().ok_or("no tensors")?;
        if q_entry.name != "Q_init" || q_entry.shape.len() != 2 {
            return Err("first tensor must be the 2-D Q_init".into());
        }
        let (qr, qc) = (q_entry.shape[0], q_entry.shape[1]);
        let q_init = DenseMatrix::from_vec(qr, qc, take(qr * qc)).map_err(|e| e.to_string())?;
        let expected = header.config.num_stages * STAGE_PARAM_NAMES.len();
        if header.tensors.len() != expected + 1 {
            return Err(format!(
                "{} parameter tensors for {} stages",
                header.tensors.len() - 1,
                header.config.num_stages
            ));
        }
        let mut stages = Vec::new();
        for k in 0..header.config.num_stages {
            let mut list = Vec::new();
            for field in STAGE_PARAM_NAMES {
                let e = entries.next().expect("count checked");
                if e.name != param_name(k, field) {
                    return Err(format!("expected {}, found {}", param_name(k, field), e.name));
                }
                let n = e.shape.iter().product();
                list.push(Tensor::new(&e.shape, take(n)).map_err(|e| e.to_string())?);
            }
            stages.push(StageParams::from_tensors(list).map_err(|e| e.to_string())?);
        }
        Ok(Self {
            config: header.config,
            fingerprint: header.fingerprint,
            grid: header.grid,
            q_init,
            stages,
            trace: header.trace,
        })
    }
}
