//! Training configuration, read from a flat TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::losses::SmarBand;
use crate::model::ModelConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,

    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub ffn_hidden: usize,
    pub classes: usize,

    pub dim_vision: usize,
    pub dim_text: usize,
    pub vision_fraction: f64,
    pub clusters_per_modality: usize,
    pub cluster_spread: f64,
    pub cluster_distance: f64,

    pub d_min: f64,
    pub d_max: f64,
    pub alpha: f64,
    pub beta: f64,

    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub smar_start_step: usize,
    pub modality_bias_enabled: bool,
    pub load_balance_enabled: bool,
    pub log_every: usize,
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            layers: 4,
            experts: 8,
            top_k: 2,
            hidden: 64,
            ffn_hidden: 128,
            classes: 8,
            dim_vision: 16,
            dim_text: 16,
            vision_fraction: 0.8,
            clusters_per_modality: 8,
            cluster_spread: 0.5,
            cluster_distance: 2.0,
            d_min: 1.5,
            d_max: 2.0,
            alpha: 0.01,
            beta: 0.01,
            learning_rate: 0.05,
            momentum: 0.9,
            steps: 2000,
            batch_size: 64,
            seed: 0,
            smar_start_step: 0,
            modality_bias_enabled: true,
            load_balance_enabled: false,
            log_every: 50,
            eval_batches: 16,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Schema {
                expected: CONFIG_SCHEMA_VERSION,
                found: cfg.schema_version,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    /// Applies a `key=value` override; the value is parsed as a TOML scalar.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let value = value.trim();
        let mut table: toml::Table =
            toml::from_str(&self.to_toml_string()).expect("round-trips through toml");
        if !table.contains_key(key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        let updated: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{key}`: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.smar_start_step > self.steps {
            return Err(Error::Config(format!(
                "smar_start_step {} exceeds steps {}",
                self.smar_start_step, self.steps
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config("learning_rate must be > 0 and momentum in [0,1)".into()));
        }
        self.band().map_err(|e| Error::Config(e.to_string()))?;
        self.model_config().validate()?;
        self.synth_config().validate()?;
        Ok(())
    }

    pub fn band(&self) -> Result<SmarBand> {
        SmarBand::new(self.d_min, self.d_max)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim_vision: self.dim_vision,
            dim_text: self.dim_text,
            hidden: self.hidden,
            ffn_hidden: self.ffn_hidden,
            classes: self.classes,
            layers: self.layers,
            experts: self.experts,
            top_k: self.top_k,
            modality_bias: self.modality_bias_enabled,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            vision_fraction: self.vision_fraction,
            tokens_per_batch: self.batch_size,
            dim_vision: self.dim_vision,
            dim_text: self.dim_text,
            classes: self.classes,
            clusters_per_modality: self.clusters_per_modality,
            cluster_spread: self.cluster_spread,
            cluster_distance: self.cluster_distance,
        }
    }

    /// Whether the band penalty contributes at `step`.
    pub fn smar_active(&self, step: usize) -> bool {
        self.beta > 0.0 && step >= self.smar_start_step
    }

    pub fn balance_active(&self) -> bool {
        self.load_balance_enabled && self.alpha > 0.0
    }
}
