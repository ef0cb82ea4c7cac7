//! Test oracles. Top-K, MRD and the dense forward pass are plain loops over
//! matrix values; the gradient checks compare backprop with central
//! differences.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smar_core::data::TokenBatch;
use smar_core::model::MoeModel;
use smar_core::mrd::MRD_EPSILON;
use smar_core::{Graph, Matrix, Modality, Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-3;
/// Magnitude below which gradient errors are measured absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Worst relative error between backprop and central differences for a
/// scalar function of several matrix inputs. `build` must return a `1×1`
/// tensor. Coordinates for which `skip(inputs, which, index)` is true are
/// ignored (non-differentiable points).
pub fn gradcheck<F, S>(inputs: &[Matrix], build: F, skip: S) -> Result<f64>
where
    F: Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
    S: Fn(&[Matrix], usize, (usize, usize)) -> bool,
{
    gradcheck_against(inputs, &build, &build, skip)
}

/// Backprop through `analytic` against central differences of `numeric`;
/// the two differ when `analytic` contains stop-gradient nodes.
pub fn gradcheck_against<A, N, S>(inputs: &[Matrix], analytic: A, numeric: N, skip: S) -> Result<f64>
where
    A: Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
    N: Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
    S: Fn(&[Matrix], usize, (usize, usize)) -> bool,
{
    let eval = |xs: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new();
        let ts: Vec<Tensor> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = numeric(&mut g, &ts)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let ts: Vec<Tensor> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = analytic(&mut g, &ts)?;
    g.backward(out)?;
    let grads: Vec<Matrix> = ts
        .iter()
        .zip(inputs)
        .map(|(&t, x)| g.grad(t).cloned().unwrap_or_else(|| Matrix::zeros(x.dim())))
        .collect();

    let mut worst = 0.0f64;
    for (which, x) in inputs.iter().enumerate() {
        for idx in ndarray::indices(x.dim()) {
            if skip(inputs, which, idx) {
                continue;
            }
            let mut plus = inputs.to_vec();
            plus[which][idx] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[which][idx] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grads[which][idx], numeric));
        }
    }
    Ok(worst)
}

/// Top-K by descending probability with lowest-index tie-break, and the
/// renormalised weights of the selected experts.
pub fn oracle_top_k(p: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    let z: f64 = order.iter().map(|&e| p[e]).sum();
    let mut w = vec![0.0; p.len()];
    for &e in &order {
        w[e] = p[e] / z;
    }
    (order, w)
}

pub fn oracle_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Token-by-token accumulation of the per-modality routing distribution
/// from router probabilities.
pub struct OracleMrd {
    pub q_vision: Vec<f64>,
    pub q_text: Vec<f64>,
    pub d: f64,
}

pub fn oracle_mrd(probs: &Matrix, labels: &[Modality], k: usize) -> OracleMrd {
    let e = probs.ncols();
    let mut count = [vec![0usize; e], vec![0usize; e]];
    let mut wsum = [vec![0.0; e], vec![0.0; e]];
    let mut n = [0usize; 2];
    for (i, &m) in labels.iter().enumerate() {
        let slot = match m {
            Modality::Vision => 0,
            Modality::Text => 1,
        };
        n[slot] += 1;
        let row: Vec<f64> = probs.row(i).to_vec();
        let (sel, w) = oracle_top_k(&row, k);
        for s in sel {
            count[slot][s] += 1;
        }
        for j in 0..e {
            wsum[slot][j] += w[j];
        }
    }
    let q = |slot: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..e)
            .map(|j| {
                let f = count[slot][j] as f64 / (k * n[slot]) as f64;
                let r = wsum[slot][j] / n[slot] as f64;
                f * r + MRD_EPSILON
            })
            .collect();
        let z: f64 = raw.iter().sum();
        raw.iter().map(|x| x / z).collect()
    };
    let (qv, qt) = (q(0), q(1));
    let d = 0.5
        * qv
            .iter()
            .zip(&qt)
            .map(|(a, b)| a * (a / b).ln() + b * (b / a).ln())
            .sum::<f64>();
    OracleMrd {
        q_vision: qv,
        q_text: qt,
        d,
    }
}

/// Dense forward pass: every expert runs on every token and is masked by
/// the renormalised top-K weight. Returns the class logits.
pub fn dense_forward(model: &MoeModel, batch: &TokenBatch) -> Matrix {
    let cfg = model.config();
    let n = batch.len();
    let h = cfg.hidden;
    let mut x = Matrix::zeros((n, h));
    for i in 0..n {
        let feats = ndarray::Array1::from(batch.features(i));
        let proj = match batch.layout.labels()[i] {
            Modality::Vision => &model.vision_proj,
            Modality::Text => &model.text_proj,
        };
        x.row_mut(i).assign(&feats.dot(proj));
    }
    for layer in &model.layers {
        let mut y = x.clone();
        for i in 0..n {
            let xi = x.row(i).to_owned();
            let mut logits = xi.dot(&layer.router.gate);
            if layer.router.modality_bias {
                let b = match batch.layout.labels()[i] {
                    Modality::Vision => &layer.router.bias_vision,
                    Modality::Text => &layer.router.bias_text,
                };
                logits = logits + b.row(0);
            }
            let p = oracle_softmax(logits.as_slice().unwrap());
            let (_, w) = oracle_top_k(&p, layer.top_k);
            for (e, ex) in layer.experts.iter().enumerate() {
                let hidden = xi.dot(&ex.w1).mapv(|v| v.max(0.0));
                let out = hidden.dot(&ex.w2);
                let mut yi = y.row_mut(i);
                yi.scaled_add(w[e], &out);
            }
        }
        x = y;
    }
    x.dot(&model.head)
}

/// Random probability vector with strictly positive entries.
pub fn random_distribution(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random_range(1e-3..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|x| x / z).collect()
}

/// Random modality labels with at least one token of each modality.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<Modality> {
    assert!(n >= 2);
    let mut labels: Vec<Modality> = (0..n)
        .map(|_| if rng.random_bool(0.6) { Modality::Vision } else { Modality::Text })
        .collect();
    labels[0] = Modality::Vision;
    labels[1] = Modality::Text;
    labels
}
