//! Synthetic modality-labelled token batches.
//!
//! Each modality owns `clusters_per_modality` Gaussian clusters in its own
//! feature space. Vision cluster centres are shifted by `+δ/2` and text
//! centres by `−δ/2` along the first feature axis, with the random part of
//! the centres re-centred to zero mean, so the population means of the two
//! modalities are exactly `δ = cluster_distance` apart on the shared leading
//! coordinates. A token's class is its cluster index modulo `classes`.
//!
//! Everything is a pure function of `(seed, step)`: cluster centres come from
//! stream 0 of a ChaCha8 generator seeded with `seed`, batch `step` from
//! stream `step + 1`.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalityLayout};

pub const BATCH_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub vision_fraction: f64,
    pub tokens_per_batch: usize,
    pub dim_vision: usize,
    pub dim_text: usize,
    pub classes: usize,
    pub clusters_per_modality: usize,
    pub cluster_spread: f64,
    pub cluster_distance: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vision_fraction: 0.8,
            tokens_per_batch: 64,
            dim_vision: 16,
            dim_text: 16,
            classes: 8,
            clusters_per_modality: 8,
            cluster_spread: 0.5,
            cluster_distance: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.vision_fraction > 0.0 && self.vision_fraction < 1.0) {
            return bad(format!("vision_fraction must be in (0,1), got {}", self.vision_fraction));
        }
        if self.tokens_per_batch < 2 {
            return bad("tokens_per_batch must be >= 2".into());
        }
        if self.dim_vision == 0 || self.dim_text == 0 {
            return bad("feature dims must be >= 1".into());
        }
        if self.classes == 0 || self.clusters_per_modality == 0 {
            return bad("classes and clusters_per_modality must be >= 1".into());
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return bad(format!("cluster_spread must be >= 0, got {}", self.cluster_spread));
        }
        if !(self.cluster_distance >= 0.0 && self.cluster_distance.is_finite()) {
            return bad(format!("cluster_distance must be >= 0, got {}", self.cluster_distance));
        }
        Ok(())
    }

    /// Vision tokens per batch: `round(f·N)` clamped so both modalities
    /// are present.
    pub fn vision_tokens(&self) -> usize {
        let n = self.tokens_per_batch;
        ((self.vision_fraction * n as f64).round() as usize).clamp(1, n - 1)
    }
}

/// One batch of raw modality features.
///
/// `vision` rows follow the order of the vision tokens in `layout`, and
/// likewise for `text`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub vision: Matrix,
    pub text: Matrix,
    pub layout: ModalityLayout,
    pub labels: Vec<usize>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature row of token `i`.
    pub fn features(&self, i: usize) -> Vec<f64> {
        let m = self.layout.labels()[i];
        let indices = self.layout.indices(m);
        let r = indices.iter().position(|&j| j == i).expect("token in layout");
        let src = match m {
            Modality::Vision => &self.vision,
            Modality::Text => &self.text,
        };
        src.row(r).to_vec()
    }

    /// Batch with every token repeated `times` times in place.
    pub fn repeat_tokens(&self, times: usize) -> Result<TokenBatch> {
        let mut labels = Vec::new();
        let mut modalities = Vec::new();
        let mut vis = Vec::new();
        let mut txt = Vec::new();
        for i in 0..self.len() {
            let f = self.features(i);
            let m = self.layout.labels()[i];
            for _ in 0..times {
                labels.push(self.labels[i]);
                modalities.push(m);
                match m {
                    Modality::Vision => vis.extend_from_slice(&f),
                    Modality::Text => txt.extend_from_slice(&f),
                }
            }
        }
        let dv = self.vision.ncols();
        let dt = self.text.ncols();
        Ok(TokenBatch {
            vision: Matrix::from_shape_vec((vis.len() / dv.max(1), dv), vis)
                .map_err(|e| Error::Input(e.to_string()))?,
            text: Matrix::from_shape_vec((txt.len() / dt.max(1), dt), txt)
                .map_err(|e| Error::Input(e.to_string()))?,
            layout: ModalityLayout::new(modalities)?,
            labels,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SynthGenerator {
    cfg: SynthConfig,
    vision_centers: Matrix,
    text_centers: Matrix,
}

fn centers(rng: &mut ChaCha8Rng, clusters: usize, dim: usize, shift: f64) -> Matrix {
    let mut c = Matrix::from_shape_fn((clusters, dim), |_| StandardNormal.sample(rng));
    let mean = c.mean_axis(ndarray::Axis(0)).expect("clusters >= 1");
    c -= &mean;
    c.column_mut(0).mapv_inplace(|x| x + shift);
    c
}

impl SynthGenerator {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let half = cfg.cluster_distance / 2.0;
        let vision_centers = centers(&mut rng, cfg.clusters_per_modality, cfg.dim_vision, half);
        let text_centers = centers(&mut rng, cfg.clusters_per_modality, cfg.dim_text, -half);
        Ok(Self {
            cfg,
            vision_centers,
            text_centers,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn centers(&self, m: Modality) -> &Matrix {
        match m {
            Modality::Vision => &self.vision_centers,
            Modality::Text => &self.text_centers,
        }
    }

    /// Batch number `step`.
    pub fn batch(&self, step: u64) -> TokenBatch {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step.wrapping_add(1));

        let n = cfg.tokens_per_batch;
        let nv = cfg.vision_tokens();
        let mut modalities: Vec<Modality> = (0..n)
            .map(|i| if i < nv { Modality::Vision } else { Modality::Text })
            .collect();
        // Fisher-Yates so the two modalities interleave
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            modalities.swap(i, j);
        }

        let mut vision = Matrix::zeros((nv, cfg.dim_vision));
        let mut text = Matrix::zeros((n - nv, cfg.dim_text));
        let (mut rv, mut rt) = (0, 0);
        let mut labels = Vec::with_capacity(n);
        for &m in &modalities {
            let cluster = rng.random_range(0..cfg.clusters_per_modality);
            labels.push(cluster % cfg.classes);
            let (dst, row, c) = match m {
                Modality::Vision => {
                    rv += 1;
                    (&mut vision, rv - 1, &self.vision_centers)
                }
                Modality::Text => {
                    rt += 1;
                    (&mut text, rt - 1, &self.text_centers)
                }
            };
            for (j, x) in dst.row_mut(row).iter_mut().enumerate() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *x = c[[cluster, j]] + cfg.cluster_spread * noise;
            }
        }
        TokenBatch {
            vision,
            text,
            layout: ModalityLayout::new(modalities).expect("n >= 2"),
            labels,
        }
    }
}

/// Convenience wrapper: builds the generator and draws batch `step`.
pub fn generate_batch(cfg: &SynthConfig, step: u64) -> Result<TokenBatch> {
    Ok(SynthGenerator::new(cfg.clone())?.batch(step))
}

/// One JSON line of a batch dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub schema_version: u32,
    pub seed: u64,
    pub step: u64,
    pub modalities: Vec<Modality>,
    pub labels: Vec<usize>,
    /// Per token, in token order; length `dim_vision` or `dim_text`.
    pub features: Vec<Vec<f64>>,
}

impl BatchRecord {
    pub fn from_batch(seed: u64, step: u64, batch: &TokenBatch) -> Self {
        Self {
            schema_version: BATCH_SCHEMA_VERSION,
            seed,
            step,
            modalities: batch.layout.labels().to_vec(),
            labels: batch.labels.clone(),
            features: (0..batch.len()).map(|i| batch.features(i)).collect(),
        }
    }

    pub fn into_batch(self, dim_vision: usize, dim_text: usize) -> Result<TokenBatch> {
        if self.schema_version != BATCH_SCHEMA_VERSION {
            return Err(Error::Schema {
                expected: BATCH_SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        if self.features.len() != self.modalities.len() || self.labels.len() != self.modalities.len() {
            return Err(Error::Input("batch record arrays differ in length".into()));
        }
        let mut vis = Vec::new();
        let mut txt = Vec::new();
        for (m, f) in self.modalities.iter().zip(&self.features) {
            let (dst, dim) = match m {
                Modality::Vision => (&mut vis, dim_vision),
                Modality::Text => (&mut txt, dim_text),
            };
            if f.len() != dim {
                return Err(Error::Input(format!("feature row of length {} , expected {dim}", f.len())));
            }
            dst.extend_from_slice(f);
        }
        Ok(TokenBatch {
            vision: Matrix::from_shape_vec((vis.len() / dim_vision, dim_vision), vis)
                .map_err(|e| Error::Input(e.to_string()))?,
            text: Matrix::from_shape_vec((txt.len() / dim_text, dim_text), txt)
                .map_err(|e| Error::Input(e.to_string()))?,
            layout: ModalityLayout::new(self.modalities)?,
            labels: self.labels,
        })
    }
}

pub fn write_batches<W: Write>(mut w: W, records: &[BatchRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_batches<R: BufRead>(r: R) -> Result<Vec<BatchRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
