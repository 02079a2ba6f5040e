//! Binary checkpoints: `AVDGPCK1`, a little-endian `u32` header length, a
//! JSON header, then every parameter as little-endian `f64`.

use crate::adcore::{ParamStore, Tensor};
use crate::config::ModelConfig;
use crate::data::Standardizer;
use crate::deepmodel::DgpModel;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"AVDGPCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    epoch: usize,
    input_dim: usize,
    config: ModelConfig,
    standardizer: Option<Standardizer>,
    manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub input_dim: usize,
    pub standardizer: Option<Standardizer>,
    pub manifest: Vec<ManifestEntry>,
    pub values: Vec<Tensor>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn from_model(
        model: &DgpModel,
        config: &ModelConfig,
        epoch: usize,
        standardizer: Option<Standardizer>,
    ) -> Self {
        Self::from_values(model, config, epoch, standardizer, model.params.values().to_vec())
    }

    /// Like [`Checkpoint::from_model`] with substitute parameter values, e.g.
    /// those of the best validation epoch.
    pub fn from_values(
        model: &DgpModel,
        config: &ModelConfig,
        epoch: usize,
        standardizer: Option<Standardizer>,
        values: Vec<Tensor>,
    ) -> Self {
        let mut offset = 0;
        let manifest = model
            .params
            .ids()
            .map(|id| {
                let e = ManifestEntry {
                    name: model.params.name(id).to_string(),
                    shape: values[id.0].shape().to_vec(),
                    offset,
                };
                offset += values[id.0].len();
                e
            })
            .collect();
        Checkpoint {
            config: config.clone(),
            config_hash: config.hash(),
            epoch,
            input_dim: model.spec.dims[0],
            standardizer,
            manifest,
            values,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            input_dim: self.input_dim,
            config: self.config.clone(),
            standardizer: self.standardizer.clone(),
            manifest: self.manifest.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let n: usize = self.values.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(12 + json.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.values {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing AVDGPCK1 magic"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < len {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.config.hash() != header.config_hash {
            return Err(corrupt("embedded config does not match its hash"));
        }
        let payload = &body[len..];
        let mut expected = 0;
        for e in &header.manifest {
            if e.offset != expected {
                return Err(corrupt(format!("parameter `{}` has offset {} (expected {expected})", e.name, e.offset)));
            }
            expected += e.shape.iter().product::<usize>();
        }
        if payload.len() != 8 * expected {
            return Err(corrupt(format!("payload holds {} bytes, manifest needs {}", payload.len(), 8 * expected)));
        }
        let values = header
            .manifest
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let data = payload[8 * e.offset..8 * (e.offset + n)]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::new(e.shape.clone(), data)
            })
            .collect();
        Ok(Checkpoint {
            config: header.config,
            config_hash: header.config_hash,
            epoch: header.epoch,
            input_dim: header.input_dim,
            standardizer: header.standardizer,
            manifest: header.manifest,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads a checkpoint only if it was written for `config`.
    pub fn load_for(path: &Path, config: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let want = config.hash();
        if ck.config_hash != want {
            return Err(Error::Checkpoint(format!(
                "refusing to load: checkpoint was written for config {} but the current config hashes to {want}",
                ck.config_hash
            )));
        }
        Ok(ck)
    }

    /// Copies the stored values into `params`, matching by name and shape.
    pub fn restore_into(&self, params: &mut ParamStore) -> Result<()> {
        if self.manifest.len() != params.len() {
            return Err(corrupt(format!("{} parameters stored, model has {}", self.manifest.len(), params.len())));
        }
        for (e, v) in self.manifest.iter().zip(&self.values) {
            let id = params.find(&e.name).ok_or_else(|| corrupt(format!("unknown parameter `{}`", e.name)))?;
            if params.get(id).shape() != v.shape() {
                return Err(corrupt(format!(
                    "parameter `{}` has shape {:?}, model expects {:?}",
                    e.name,
                    v.shape(),
                    params.get(id).shape()
                )));
            }
            params.set(id, v.clone());
        }
        Ok(())
    }

    /// Rebuilds the model this checkpoint was written from.
    pub fn model(&self) -> Result<DgpModel> {
        let m = self.config.inducing.iter().copied().max().unwrap_or(1);
        let placeholder = Tensor::zeros(vec![m, self.input_dim]);
        let mut model = DgpModel::from_config(&self.config, &placeholder)?;
        self.restore_into(&mut model.params)?;
        Ok(model)
    }
}
