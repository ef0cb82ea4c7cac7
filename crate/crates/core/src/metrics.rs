//! JSONL metrics records shared by training logs and evaluation dumps.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub main: f64,
    pub balance: f64,
    pub smar: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: usize,
    /// `None` when the batch lacked one modality.
    pub d_sym_kl: Option<f64>,
    /// Unweighted band penalty for this layer (0 when the term is inactive).
    pub smar: f64,
    pub expert_shares_vision: Vec<f64>,
    pub expert_shares_text: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub schema_version: u32,
    pub step: usize,
    pub losses: LossValues,
    pub per_layer: Vec<LayerMetrics>,
    pub accuracy: f64,
    pub n_vision: usize,
    pub n_text: usize,
    /// Experts selected per token.
    pub top_k: usize,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        let l = &self.losses;
        [l.main, l.balance, l.smar, l.total, self.accuracy]
            .iter()
            .chain(self.per_layer.iter().flat_map(|p| p.d_sym_kl.iter()))
            .all(|v| v.is_finite())
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[StepMetrics]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a metrics log, rejecting records with a different schema version.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<StepMetrics>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: serde_json::Value = serde_json::from_str(&line)?;
        let found = raw
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Input("metrics record without schema_version".into()))?;
        if found != METRICS_SCHEMA_VERSION as u64 {
            return Err(Error::Schema {
                expected: METRICS_SCHEMA_VERSION,
                found: found as u32,
            });
        }
        out.push(serde_json::from_value(raw)?);
    }
    Ok(out)
}
