//! JSON checkpoint: named parameter matrices plus the training config and a
//! hash of the model shape configuration.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Matrix;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MoeModel};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedMatrix {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub parameters: Vec<NamedMatrix>,
}

/// Hex SHA-256 of the model configuration's canonical JSON.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("model config serialises");
    hex::encode(Sha256::digest(&bytes))
}

impl Checkpoint {
    pub fn from_model(config: &TrainConfig, model: &MoeModel) -> Self {
        let parameters = model
            .parameters()
            .into_iter()
            .map(|(name, m)| NamedMatrix {
                name,
                rows: m.nrows(),
                cols: m.ncols(),
                values: m.iter().copied().collect(),
            })
            .collect();
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config_hash: config_hash(model.config()),
            config: config.clone(),
            parameters,
        }
    }

    /// Rebuilds the model, checking version, hash, names and shapes.
    pub fn into_model(self) -> Result<(TrainConfig, MoeModel)> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Schema {
                expected: CHECKPOINT_SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        self.config.validate()?;
        let model_cfg = self.config.model_config();
        if config_hash(&model_cfg) != self.config_hash {
            return Err(Error::Checkpoint("config hash does not match stored config".into()));
        }
        let mut model = MoeModel::new(model_cfg, self.config.seed)?;
        let expected: Vec<(String, (usize, usize))> = model
            .parameters()
            .iter()
            .map(|(n, m)| (n.clone(), m.dim()))
            .collect();
        if expected.len() != self.parameters.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter matrices, found {}",
                expected.len(),
                self.parameters.len()
            )));
        }
        for ((slot, (name, shape)), stored) in model
            .parameters_mut()
            .into_iter()
            .zip(expected)
            .zip(self.parameters)
        {
            if stored.name != name || (stored.rows, stored.cols) != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {}x{} does not match `{name}` {}x{}",
                    stored.name, stored.rows, stored.cols, shape.0, shape.1
                )));
            }
            *slot = Matrix::from_shape_vec(shape, stored.values)
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        }
        Ok((self.config, model))
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        Ok(serde_json::from_reader(r)?)
    }
}
