//! Versioned model checkpoints.
//!
//! A checkpoint is a JSON document holding the model config, its hash and
//! every named parameter tensor. Loading rebuilds the architecture from the
//! stored config and refuses anything whose names, shapes or hash disagree.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub config_hash: String,
    /// Training epoch the parameters come from, if any.
    pub epoch: Option<usize>,
    pub parameters: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, epoch: Option<usize>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            config_hash: model.config.hash(),
            epoch,
            parameters: model
                .parameters()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model. With `expected`, the stored config must match it.
    pub fn into_model(self, expected: Option<&ModelConfig>) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion {
                found: self.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let actual = self.config.hash();
        if actual != self.config_hash {
            return Err(Error::Checkpoint(format!(
                "stored hash {} does not match its config ({actual})",
                self.config_hash
            )));
        }
        if let Some(expected) = expected {
            let want = expected.hash();
            if want != actual {
                return Err(Error::CheckpointMismatch { found: actual, expected: want });
            }
        }
        let mut model = Model::new(self.config, 0)?;
        if model.store.len() != self.parameters.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                self.parameters.len()
            )));
        }
        for p in self.parameters {
            let id = model
                .store
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", p.name)))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != (p.rows, p.cols) || p.data.len() != p.rows * p.cols {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {}x{}, expected {}x{}",
                    p.name,
                    p.rows,
                    p.cols,
                    slot.rows(),
                    slot.cols()
                )));
            }
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter `{}` in checkpoint", p.name)));
            }
            slot.data_mut().copy_from_slice(&p.data);
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, epoch: Option<usize>, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::from_model(model, epoch);
    let json = serde_json::to_string(&ckpt).map_err(|e| Error::json("encoding checkpoint", e))?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(json.as_bytes())
        .and_then(|_| file.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::json(format!("reading checkpoint {}", path.display()), e))?;
    ckpt.into_model(expected)
}
