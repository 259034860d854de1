//! `SXCK` checkpoint files.
//!
//! Layout: magic `SXCK`, `u32` format version, `u32` header length, UTF-8
//! JSON header, then raw little-endian tensor payloads. The header carries
//! the model config, step counter, metric history, rng state and a table of
//! tensor names, shapes, dtypes and byte offsets (relative to the payload
//! start). Parameters come first, optimizer moments after them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ParamSet};
use crate::optim::AdamState;
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SXCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint stores {found:?} tensors, requested {wanted:?}")]
    DType { found: DType, wanted: DType },
    #[error(transparent)]
    Mismatch(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Enough to resume the data order: the run seed, the epoch in progress and
/// the number of batches of that epoch already consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
    pub cursor: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParamSet<T>,
    pub optimizer: Option<AdamState<T>>,
    pub rng: RngState,
    pub history: Vec<MetricRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    step: u64,
    moments: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    step: u64,
    rng: RngState,
    history: Vec<MetricRecord>,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(config: ModelConfig, params: ParamSet<T>) -> Self {
        Self {
            config,
            step: 0,
            params,
            optimizer: None,
            rng: RngState::default(),
            history: Vec::new(),
        }
    }

    /// Verifies the stored tensors against `config`, naming the first
    /// tensor that disagrees.
    pub fn check_config(&self, config: &ModelConfig) -> Result<(), CheckpointError> {
        Ok(self.params.check_against(config)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let mut entry = |name: String, t: &Tensor<T>| {
            let e = TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: T::DTYPE,
                offset,
            };
            offset += (t.numel() * T::DTYPE.size()) as u64;
            e
        };
        let tensors: Vec<TensorEntry> = self.params.iter().map(|(n, t)| entry(n.to_string(), t)).collect();
        let optimizer = self.optimizer.as_ref().map(|st| {
            let names: Vec<&str> = self.params.names().collect();
            let mut moments = Vec::with_capacity(2 * names.len());
            for (kind, ts) in [("m", &st.m), ("v", &st.v)] {
                for (n, t) in names.iter().zip(ts) {
                    moments.push(entry(format!("adam.{kind}.{n}"), t));
                }
            }
            OptimizerHeader { step: st.step, moments }
        });
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            rng: self.rng,
            history: self.history.clone(),
            tensors,
            optimizer,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut write = |t: &Tensor<T>| {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        };
        self.params.tensors().for_each(&mut write);
        if let Some(st) = &self.optimizer {
            st.m.iter().chain(&st.v).for_each(&mut write);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let fail = |offset: usize, reason: &str| CheckpointError::Format {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(fail(0, "bad magic"));
        }
        let u32_at = |pos: usize| -> Result<u32, CheckpointError> {
            bytes
                .get(pos..pos + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| fail(pos, "truncated preamble"))
        };
        let version = u32_at(4)?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let header_len = u32_at(8)? as usize;
        let json = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| fail(12, "truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| fail(12, &format!("bad header: {e}")))?;
        let base = 12 + header_len;
        let payload = &bytes[base..];

        let mut expected_end = 0usize;
        let mut read = |e: &TensorEntry| -> Result<Tensor<T>, CheckpointError> {
            if e.dtype != T::DTYPE {
                return Err(CheckpointError::DType {
                    found: e.dtype,
                    wanted: T::DTYPE,
                });
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            if start != expected_end {
                return Err(fail(base + start, &format!("offset table out of order at {}", e.name)));
            }
            let end = start + n * T::DTYPE.size();
            let raw = payload.get(start..end).ok_or_else(|| {
                fail(base + start, &format!("truncated payload for {}", e.name))
            })?;
            expected_end = end;
            let data = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
            Tensor::new(e.shape.clone(), data).map_err(|err| fail(base + start, &err.to_string()))
        };

        let mut params = ParamSet::new();
        for e in &header.tensors {
            let t = read(e)?;
            params
                .insert(e.name.clone(), t)
                .map_err(|err| fail(12, &err.to_string()))?;
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(oh) => {
                let k = params.len();
                if oh.moments.len() != 2 * k {
                    return Err(fail(12, "optimizer table does not match parameter table"));
                }
                let mut ts = Vec::with_capacity(2 * k);
                for e in &oh.moments {
                    ts.push(read(e)?);
                }
                let v = ts.split_off(k);
                Some(AdamState {
                    step: oh.step,
                    m: ts,
                    v,
                })
            }
        };
        if expected_end != payload.len() {
            return Err(fail(base + expected_end, "trailing bytes after payload"));
        }
        let ckpt = Self {
            config: header.config,
            step: header.step,
            params,
            optimizer,
            rng: header.rng,
            history: header.history,
        };
        ckpt.check_config(&ckpt.config)?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.encode()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

/// Reads only the dtype of a checkpoint file so callers can pick a precision.
pub fn peek_dtype(bytes: &[u8]) -> Option<DType> {
    let len = u32::from_le_bytes(bytes.get(8..12)?.try_into().ok()?) as usize;
    let header: Header = serde_json::from_slice(bytes.get(12..12 + len)?).ok()?;
    Some(header.tensors.first()?.dtype)
}
