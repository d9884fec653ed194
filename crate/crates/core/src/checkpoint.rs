//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, `u64` LE header length, UTF-8 JSON header, then the
//! concatenated `f32` LE payload of every named array listed in the header
//! (model parameters followed by the two optimizer moment sets).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{BETA_END, BETA_START};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Mcddpm};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"MCDDPMCK";
pub const FORMAT_VERSION: u32 = 1;

const FIRST_MOMENT: &str = "adam.m:";
const SECOND_MOMENT: &str = "adam.v:";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub epoch: usize,
    /// Validation reconstruction error at `epoch`, if validation ran.
    pub val_error: Option<f64>,
    pub params: ParamStore<f32>,
    pub optimizer: Adam<f32>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleMeta {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    schedule: ScheduleMeta,
    epoch: usize,
    val_error: Option<f64>,
    optimizer: OptimizerMeta,
    arrays: Vec<ArrayEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidCheckpoint(msg.into())
}

impl Checkpoint {
    pub fn capture(
        model: &Mcddpm<f32>,
        optimizer: &Adam<f32>,
        train_config: &TrainConfig,
        epoch: usize,
        val_error: Option<f64>,
    ) -> Checkpoint {
        Checkpoint {
            model_config: model.config().clone(),
            train_config: train_config.clone(),
            epoch,
            val_error,
            params: model.params().clone(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn model(&self) -> Result<Mcddpm<f32>> {
        Mcddpm::from_params(self.model_config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let groups = [("", &self.params), (FIRST_MOMENT, &self.optimizer.first), (SECOND_MOMENT, &self.optimizer.second)];
        for (prefix, store) in groups {
            for (name, t) in store.iter() {
                arrays.push(ArrayEntry { name: format!("{prefix}{name}"), shape: t.shape().to_vec(), offset: payload.len() / 4 });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let c = &self.optimizer.config;
        let header = Header {
            version: FORMAT_VERSION,
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            schedule: ScheduleMeta {
                steps: self.train_config.diffusion_steps,
                beta_start: BETA_START,
                beta_end: BETA_END,
            },
            epoch: self.epoch,
            val_error: self.val_error,
            optimizer: OptimizerMeta { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.eps, step: self.optimizer.step },
            arrays,
        };
        let json = serde_json::to_vec_pretty(&header).map_err(|e| bad(format!("cannot encode header: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("malformed header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.version)));
        }
        if header.schedule.beta_start != BETA_START || header.schedule.beta_end != BETA_END {
            return Err(bad(format!(
                "schedule endpoints {}..{} differ from {}..{}",
                header.schedule.beta_start, header.schedule.beta_end, BETA_START, BETA_END
            )));
        }
        let payload = &bytes[16 + hlen..];
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let floats: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut params = ParamStore::new();
        let mut first = ParamStore::new();
        let mut second = ParamStore::new();
        for a in header.arrays {
            let len: usize = a.shape.iter().product();
            let data = floats
                .get(a.offset..a.offset + len)
                .ok_or_else(|| bad(format!("array {} runs past the payload", a.name)))?
                .to_vec();
            let t = Tensor::new(a.shape, data);
            if let Some(n) = a.name.strip_prefix(FIRST_MOMENT) {
                first.insert(n, t);
            } else if let Some(n) = a.name.strip_prefix(SECOND_MOMENT) {
                second.insert(n, t);
            } else {
                params.insert(a.name, t);
            }
        }
        let o = header.optimizer;
        let optimizer = Adam {
            config: AdamConfig { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps },
            step: o.step,
            first,
            second,
        };
        let ck = Checkpoint {
            model_config: header.model,
            train_config: header.train,
            epoch: header.epoch,
            val_error: header.val_error,
            params,
            optimizer,
        };
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
