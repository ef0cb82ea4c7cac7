//! Post-hoc routing diagnostics from metrics records: per-layer MRD
//! distance envelopes, expert modality preference and routing collapse.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::StepMetrics;

#[derive(Clone, Debug, PartialEq)]
pub struct MrdCurve {
    pub layer: usize,
    pub d_min: f64,
    pub d_mean: f64,
    pub d_max: f64,
}

/// Min / mean / max of the recorded distances per layer. Layers without any
/// recorded distance are omitted; an empty input gives an empty report.
pub fn mrd_curves(records: &[StepMetrics]) -> Vec<MrdCurve> {
    let layers = records.iter().map(|r| r.per_layer.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    for layer in 0..layers {
        let ds: Vec<f64> = records
            .iter()
            .filter_map(|r| r.per_layer.get(layer).and_then(|p| p.d_sym_kl))
            .collect();
        if ds.is_empty() {
            continue;
        }
        out.push(MrdCurve {
            layer,
            d_min: ds.iter().copied().fold(f64::INFINITY, f64::min),
            d_mean: ds.iter().sum::<f64>() / ds.len() as f64,
            d_max: ds.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    out
}

/// Aggregate top-K selection counts per expert and modality for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSelections {
    pub layer: usize,
    pub vision: Vec<f64>,
    pub text: Vec<f64>,
    /// Tokens routed, over both modalities.
    pub tokens: f64,
}

impl LayerSelections {
    pub fn experts(&self) -> usize {
        self.vision.len()
    }

    /// Combined selection distribution over experts (sums to 1).
    pub fn selection_share(&self) -> Vec<f64> {
        let total: f64 = self.vision.iter().chain(&self.text).sum();
        self.vision
            .iter()
            .zip(&self.text)
            .map(|(v, t)| if total > 0.0 { (v + t) / total } else { 0.0 })
            .collect()
    }

    /// Fraction of tokens that selected each expert. Equals the selection
    /// share for `K = 1` and is `K` times it in general, so one expert can
    /// reach 1 regardless of `K`.
    pub fn token_load(&self) -> Vec<f64> {
        self.vision
            .iter()
            .zip(&self.text)
            .map(|(v, t)| if self.tokens > 0.0 { (v + t) / self.tokens } else { 0.0 })
            .collect()
    }
}

/// Recovers selection counts (`share × K × N_m`) from each record and sums
/// them per layer.
pub fn layer_selections(records: &[StepMetrics]) -> Vec<LayerSelections> {
    let mut out: Vec<LayerSelections> = Vec::new();
    for r in records {
        for p in &r.per_layer {
            if out.len() <= p.layer {
                out.resize_with(p.layer + 1, || LayerSelections {
                    layer: 0,
                    vision: Vec::new(),
                    text: Vec::new(),
                    tokens: 0.0,
                });
            }
            let slot = &mut out[p.layer];
            slot.layer = p.layer;
            slot.tokens += (r.n_vision + r.n_text) as f64;
            let k = r.top_k as f64;
            let e = p.expert_shares_vision.len();
            if slot.vision.len() < e {
                slot.vision.resize(e, 0.0);
                slot.text.resize(e, 0.0);
            }
            for (acc, s) in slot.vision.iter_mut().zip(&p.expert_shares_vision) {
                *acc += s * k * r.n_vision as f64;
            }
            for (acc, s) in slot.text.iter_mut().zip(&p.expert_shares_text) {
                *acc += s * k * r.n_text as f64;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPreference {
    pub layer: usize,
    /// Fraction of the modality's selections routed to each expert; `None`
    /// when the modality never appeared.
    pub vision_share: Option<Vec<f64>>,
    pub text_share: Option<Vec<f64>>,
}

fn normalise(v: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = v.iter().sum();
    (total > 0.0).then(|| v.iter().map(|x| x / total).collect())
}

pub fn expert_preference(selections: &[LayerSelections]) -> Vec<ExpertPreference> {
    selections
        .iter()
        .map(|s| ExpertPreference {
            layer: s.layer,
            vision_share: normalise(&s.vision),
            text_share: normalise(&s.text),
        })
        .collect()
}

/// Per expert, the fraction of its traffic coming from its dominant
/// modality (`NaN`-free: unused experts report 0).
pub fn modality_purity(s: &LayerSelections) -> Vec<f64> {
    s.vision
        .iter()
        .zip(&s.text)
        .map(|(&v, &t)| if v + t > 0.0 { v.max(t) / (v + t) } else { 0.0 })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCollapse {
    pub layer: usize,
    /// Largest per-expert token load.
    pub max_load: f64,
    /// Entropy of the selection share.
    pub entropy: f64,
    pub collapsed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseReport {
    pub threshold: f64,
    pub layers: Vec<LayerCollapse>,
}

impl CollapseReport {
    pub fn collapsed_layers(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| l.collapsed).map(|l| l.layer).collect()
    }

    pub fn mean_entropy(&self) -> f64 {
        self.layers.iter().map(|l| l.entropy).sum::<f64>() / self.layers.len().max(1) as f64
    }
}

/// Natural-log entropy, with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Flags layers whose most-used expert is selected by more than
/// `load_threshold` of all tokens.
pub fn detect_collapse(selections: &[LayerSelections], load_threshold: f64) -> Result<CollapseReport> {
    let mut layers = Vec::with_capacity(selections.len());
    for s in selections {
        let e = s.experts();
        if e == 0 {
            continue;
        }
        if !(load_threshold > 1.0 / e as f64 && load_threshold <= 1.0) {
            return Err(Error::Parameter(format!(
                "collapse threshold {load_threshold} outside (1/{e}, 1]"
            )));
        }
        let max_load = s.token_load().into_iter().fold(0.0, f64::max);
        layers.push(LayerCollapse {
            layer: s.layer,
            max_load,
            entropy: entropy(&s.selection_share()),
            collapsed: max_load > load_threshold,
        });
    }
    Ok(CollapseReport {
        threshold: load_threshold,
        layers,
    })
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

/// Writes `mrd_curves.csv`, `expert_pref.csv` and `collapse.csv` into `dir`.
pub fn write_csvs(
    dir: &Path,
    curves: &[MrdCurve],
    prefs: &[ExpertPreference],
    collapse: &CollapseReport,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut w = csv::Writer::from_path(dir.join("mrd_curves.csv"))?;
    w.write_record(["layer", "d_min", "d_mean", "d_max"])?;
    for c in curves {
        w.write_record([c.layer.to_string(), fmt(c.d_min), fmt(c.d_mean), fmt(c.d_max)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("expert_pref.csv"))?;
    w.write_record(["layer", "expert", "vision_share", "text_share"])?;
    for p in prefs {
        let experts = p
            .vision_share
            .as_ref()
            .or(p.text_share.as_ref())
            .map_or(0, |v| v.len());
        for e in 0..experts {
            let cell = |s: &Option<Vec<f64>>| s.as_ref().map_or(String::new(), |v| fmt(v[e]));
            w.write_record([
                p.layer.to_string(),
                e.to_string(),
                cell(&p.vision_share),
                cell(&p.text_share),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("collapse.csv"))?;
    w.write_record(["layer", "max_load", "entropy", "flag"])?;
    for l in &collapse.layers {
        w.write_record([
            l.layer.to_string(),
            fmt(l.max_load),
            fmt(l.entropy),
            (l.collapsed as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
