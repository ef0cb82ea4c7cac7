//! Modality routing distribution (MRD) and the symmetric KL distance
//! between the vision and text distributions.
//!
//! For modality `m` with `N_m` tokens and top-`K` routing:
//!
//! * `F[m,e] = (1 / K·N_m) · #{i ∈ m : e ∈ T_i}` (selection frequency)
//! * `R[m,e] = (1 / N_m) · Σ_{i ∈ m} ŵ[i,e]` (expected renormalised weight)
//! * `Q[m,e] = F[m,e] · R[m,e]`, and `q̃_m = (Q_m + ε) / Σ_e (Q[m,e] + ε)`
//!
//! `F` is piecewise constant in the parameters and enters the graph as a
//! constant; gradients flow through `R` and the normalisation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Tensor};
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalityLayout};
use crate::router::RoutingOutcome;

/// Smoothing mass added to every expert before normalising `Q`.
pub const MRD_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityRouting {
    pub frequency: Vec<f64>,
    pub expected_weight: Vec<f64>,
    /// `F ⊙ R`, before smoothing.
    pub mass: Vec<f64>,
    /// Smoothed, normalised `q̃`.
    pub distribution: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrdStats {
    pub layer: usize,
    pub vision: ModalityRouting,
    pub text: ModalityRouting,
    pub d_sym_kl: f64,
    pub n_vision: usize,
    pub n_text: usize,
}

impl MrdStats {
    pub fn modality(&self, m: Modality) -> &ModalityRouting {
        match m {
            Modality::Vision => &self.vision,
            Modality::Text => &self.text,
        }
    }
}

/// Graph handles for the differentiable parts of the MRD computation.
#[derive(Clone, Debug)]
pub struct MrdOutcome {
    pub stats: MrdStats,
    pub q_vision: Tensor,
    pub q_text: Tensor,
    pub distance: Tensor,
}

/// Selection frequency `F[m,·]` for the given tokens.
pub fn selection_frequency(outcome: &RoutingOutcome, tokens: &[usize]) -> Vec<f64> {
    let scale = 1.0 / (outcome.k * tokens.len()) as f64;
    outcome
        .selection_counts(tokens.iter().copied())
        .into_iter()
        .map(|c| c as f64 * scale)
        .collect()
}

struct ModalityTensors {
    frequency: Vec<f64>,
    expected_weight: Tensor,
    mass: Tensor,
    q: Tensor,
}

fn modality_distribution(
    g: &mut Graph,
    outcome: &RoutingOutcome,
    tokens: &[usize],
) -> Result<ModalityTensors> {
    let frequency = selection_frequency(outcome, tokens);
    let f = g.constant(Matrix::from_shape_vec((1, frequency.len()), frequency.clone()).expect("1xE"));
    let w = g.gather_rows(outcome.weights, tokens)?;
    let r = g.col_mean(w)?;
    let mass = g.mul(f, r)?;
    let smoothed = g.add_scalar(mass, MRD_EPSILON);
    let total = g.sum(smoothed);
    let inv = g.recip(total)?;
    let q = g.mul_col(smoothed, inv)?;
    Ok(ModalityTensors {
        frequency,
        expected_weight: r,
        mass,
        q,
    })
}

fn row_vec(g: &Graph, t: Tensor) -> Vec<f64> {
    g.value(t).iter().copied().collect()
}

/// Computes per-modality routing statistics and `d_sym-KL` for one layer.
///
/// Fails with [`Error::MrdUndefined`] unless both modalities are present.
pub fn compute_mrd(
    g: &mut Graph,
    outcome: &RoutingOutcome,
    layout: &ModalityLayout,
    layer: usize,
) -> Result<MrdOutcome> {
    if !layout.has_both() {
        return Err(Error::MrdUndefined {
            n_vision: layout.count(Modality::Vision),
            n_text: layout.count(Modality::Text),
        });
    }
    if layout.len() != outcome.selected.len() {
        return Err(Error::dim(
            "compute_mrd",
            format!(
                "{} labels for {} routed tokens",
                layout.len(),
                outcome.selected.len()
            ),
        ));
    }
    let v = modality_distribution(g, outcome, layout.indices(Modality::Vision))?;
    let t = modality_distribution(g, outcome, layout.indices(Modality::Text))?;
    let distance = sym_kl(g, v.q, t.q)?;

    let pack = |g: &Graph, m: ModalityTensors| ModalityRouting {
        frequency: m.frequency,
        expected_weight: row_vec(g, m.expected_weight),
        mass: row_vec(g, m.mass),
        distribution: row_vec(g, m.q),
    };
    let (q_vision, q_text) = (v.q, t.q);
    let stats = MrdStats {
        layer,
        vision: pack(g, v),
        text: pack(g, t),
        d_sym_kl: g.scalar(distance),
        n_vision: layout.count(Modality::Vision),
        n_text: layout.count(Modality::Text),
    };
    Ok(MrdOutcome {
        stats,
        q_vision,
        q_text,
        distance,
    })
}

/// Value-only MRD from a finished routing: `weights` is the `N×E` matrix of
/// renormalised top-K weights. Used where no gradient graph is needed.
pub fn stats_from_values(
    selected: &[Vec<usize>],
    weights: &Matrix,
    k: usize,
    layout: &ModalityLayout,
    layer: usize,
) -> Result<MrdStats> {
    if !layout.has_both() {
        return Err(Error::MrdUndefined {
            n_vision: layout.count(Modality::Vision),
            n_text: layout.count(Modality::Text),
        });
    }
    let experts = weights.ncols();
    let per_modality = |m: Modality| {
        let tokens = layout.indices(m);
        let n = tokens.len() as f64;
        let mut frequency = vec![0.0; experts];
        let mut expected_weight = vec![0.0; experts];
        for &i in tokens {
            for &e in &selected[i] {
                frequency[e] += 1.0;
            }
            for (e, w) in expected_weight.iter_mut().enumerate() {
                *w += weights[[i, e]];
            }
        }
        for e in 0..experts {
            frequency[e] /= k as f64 * n;
            expected_weight[e] /= n;
        }
        let mass: Vec<f64> = frequency.iter().zip(&expected_weight).map(|(f, r)| f * r).collect();
        let z: f64 = mass.iter().map(|q| q + MRD_EPSILON).sum();
        let distribution = mass.iter().map(|q| (q + MRD_EPSILON) / z).collect();
        ModalityRouting {
            frequency,
            expected_weight,
            mass,
            distribution,
        }
    };
    let vision = per_modality(Modality::Vision);
    let text = per_modality(Modality::Text);
    let d_sym_kl = sym_kl_values(&vision.distribution, &text.distribution)?;
    Ok(MrdStats {
        layer,
        vision,
        text,
        d_sym_kl,
        n_vision: layout.count(Modality::Vision),
        n_text: layout.count(Modality::Text),
    })
}

/// `½[KL(a‖b) + KL(b‖a)] = ½ Σ (a − b)(ln a − ln b)` on the graph.
pub fn sym_kl(g: &mut Graph, a: Tensor, b: Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim("sym_kl", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let la = g.log(a)?;
    let lb = g.log(b)?;
    let dp = g.sub(a, b)?;
    let dl = g.sub(la, lb)?;
    let prod = g.mul(dp, dl)?;
    let s = g.sum(prod);
    Ok(g.scale(s, 0.5))
}

/// Value-only symmetric KL with natural logarithms. Inputs must be strictly
/// positive.
pub fn sym_kl_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("sym_kl", format!("{} vs {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|&x| !(x > 0.0)) {
        return Err(Error::numeric("sym_kl", "distribution has a non-positive entry"));
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x.ln() - y.ln()))
        .sum();
    Ok(0.5 * s)
}
