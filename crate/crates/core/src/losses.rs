//! Training objective: task cross-entropy, Switch-style load balancing, the
//! tolerance-band routing loss and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Tensor};
use crate::error::{Error, Result};
use crate::router::RoutingOutcome;

/// Tolerance band `[d_min, d_max]` for the MRD distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmarBand {
    d_min: f64,
    d_max: f64,
}

impl SmarBand {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        if !(d_min.is_finite() && d_max.is_finite() && 0.0 <= d_min && d_min < d_max) {
            return Err(Error::Parameter(format!(
                "band requires 0 <= d_min < d_max, got [{d_min}, {d_max}]"
            )));
        }
        Ok(Self { d_min, d_max })
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn contains(&self, d: f64) -> bool {
        self.d_min <= d && d <= self.d_max
    }
}

/// Hinge distance of `d` from the band.
pub fn smar_penalty(d: f64, band: SmarBand) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::Input(format!("MRD distance must be >= 0, got {d}")));
    }
    Ok(if d < band.d_min {
        band.d_min - d
    } else if d > band.d_max {
        d - band.d_max
    } else {
        0.0
    })
}

/// `relu(d_min − d) + relu(d − d_max)`; the subgradient at either edge is 0.
pub fn smar_loss(g: &mut Graph, d: Tensor, band: SmarBand) -> Result<Tensor> {
    if d.shape() != (1, 1) {
        return Err(Error::dim("smar_loss", format!("distance must be 1x1, got {:?}", d.shape())));
    }
    let value = g.scalar(d);
    if !(value >= 0.0) {
        return Err(Error::Input(format!("MRD distance must be >= 0, got {value}")));
    }
    let neg = g.scale(d, -1.0);
    let below = g.add_scalar(neg, band.d_min);
    let below = g.relu(below);
    let above = g.add_scalar(d, -band.d_max);
    let above = g.relu(above);
    g.add(below, above)
}

/// Selection fraction per expert over all `K·N` (token, slot) pairs.
pub fn selection_fractions(outcome: &RoutingOutcome) -> Vec<f64> {
    let n = outcome.selected.len();
    let scale = 1.0 / (outcome.k * n) as f64;
    outcome
        .selection_counts(0..n)
        .into_iter()
        .map(|c| c as f64 * scale)
        .collect()
}

/// `E · Σ_e f_e · p̄_e` with `f` held constant.
pub fn load_balance_loss(g: &mut Graph, outcome: &RoutingOutcome) -> Result<Tensor> {
    if outcome.selected.is_empty() {
        return Err(Error::Input("load balance over an empty batch".into()));
    }
    let f = selection_fractions(outcome);
    let f = g.constant(Matrix::from_shape_vec((1, f.len()), f).expect("1xE"));
    let p_mean = g.col_mean(outcome.probs)?;
    let prod = g.mul(f, p_mean)?;
    let s = g.sum(prod);
    Ok(g.scale(s, outcome.experts as f64))
}

/// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
pub fn cross_entropy(g: &mut Graph, logits: Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, classes) = logits.shape();
    if labels.len() != n {
        return Err(Error::dim("cross_entropy", format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::Input("cross entropy over zero tokens".into()));
    }
    if let Some(bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    let log_p = g.row_log_softmax(logits)?;
    let mut one_hot = Matrix::zeros((n, classes));
    for (i, &c) in labels.iter().enumerate() {
        one_hot[[i, c]] = 1.0;
    }
    let one_hot = g.constant(one_hot);
    let picked = g.mul(log_p, one_hot)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub main: Tensor,
    pub balance: Tensor,
    /// Mean over layers, or a constant zero when disabled.
    pub smar: Tensor,
    pub total: Tensor,
    pub alpha: f64,
    pub beta: f64,
}

/// `main + α·balance + β·mean(smar_per_layer)`.
///
/// `smar_per_layer = None` disables the routing term; `Some(&[])` is an
/// error.
pub fn total_loss(
    g: &mut Graph,
    main: Tensor,
    balance: Tensor,
    smar_per_layer: Option<&[Tensor]>,
    alpha: f64,
    beta: f64,
) -> Result<LossBundle> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::Parameter(format!(
            "loss coefficients must be non-negative, got alpha={alpha} beta={beta}"
        )));
    }
    for t in [main, balance] {
        if t.shape() != (1, 1) {
            return Err(Error::dim("total_loss", format!("expected scalar, got {:?}", t.shape())));
        }
    }
    let smar = match smar_per_layer {
        None => g.scalar_constant(0.0),
        Some([]) => {
            return Err(Error::Parameter(
                "routing loss enabled with no MoE layers".into(),
            ))
        }
        Some(layers) => {
            let mut acc = layers[0];
            for &t in &layers[1..] {
                acc = g.add(acc, t)?;
            }
            g.scale(acc, 1.0 / layers.len() as f64)
        }
    };
    let weighted_balance = g.scale(balance, alpha);
    let weighted_smar = g.scale(smar, beta);
    let total = g.add(main, weighted_balance)?;
    let total = g.add(total, weighted_smar)?;
    Ok(LossBundle {
        main,
        balance,
        smar,
        total,
        alpha,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn band() -> SmarBand {
        SmarBand::new(1.5, 2.0).unwrap()
    }

    #[test]
    fn band_validation() {
        assert!(SmarBand::new(2.0, 1.5).is_err());
        assert!(SmarBand::new(1.0, 1.0).is_err());
        assert!(SmarBand::new(-0.1, 1.0).is_err());
        assert!(SmarBand::new(0.0, 0.1).is_ok());
    }

    #[test]
    fn penalty_branches() {
        assert_eq!(smar_penalty(1.7, band()).unwrap(), 0.0);
        assert_eq!(smar_penalty(1.0, band()).unwrap(), 0.5);
        assert_eq!(smar_penalty(2.5, band()).unwrap(), 0.5);
        assert!(smar_penalty(-1.0, band()).is_err());
    }

    #[test]
    fn graph_loss_gradient_regimes() {
        for (d, want_val, want_grad) in [
            (1.0, 0.5, -1.0),
            (1.7, 0.0, 0.0),
            (2.5, 0.5, 1.0),
            (1.5, 0.0, 0.0),
            (2.0, 0.0, 0.0),
        ] {
            let mut g = Graph::new();
            let x = g.param(array![[d]]);
            let l = smar_loss(&mut g, x, band()).unwrap();
            assert_eq!(g.scalar(l), want_val, "d={d}");
            g.backward(l).unwrap();
            assert_eq!(g.grad(x).unwrap()[[0, 0]], want_grad, "d={d}");
        }
    }

    #[test]
    fn cross_entropy_uniform_and_errors() {
        let mut g = Graph::new();
        let logits = g.constant(Matrix::zeros((3, 4)));
        let ce = cross_entropy(&mut g, logits, &[0, 1, 3]).unwrap();
        assert!((g.scalar(ce) - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&mut g, logits, &[0, 1, 4]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn cross_entropy_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 5.0, 20.0, 50.0] {
            let mut g = Graph::new();
            let logits = g.constant(array![[margin, 0.0, 0.0]]);
            let ce = cross_entropy(&mut g, logits, &[0]).unwrap();
            let v = g.scalar(ce);
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn total_loss_composition() {
        let mut g = Graph::new();
        let main = g.scalar_constant(1.0);
        let bal = g.scalar_constant(1.0);
        let s = g.scalar_constant(0.5);
        let b = total_loss(&mut g, main, bal, Some(&[s]), 0.0, 0.01).unwrap();
        assert!((g.scalar(b.total) - 1.005).abs() < 1e-15);

        let b = total_loss(&mut g, main, bal, None, 0.01, 0.0).unwrap();
        assert_eq!(g.scalar(b.smar), 0.0);
        assert!((g.scalar(b.total) - 1.01).abs() < 1e-15);

        let two = g.scalar_constant(2.0);
        let b = total_loss(&mut g, two, bal, Some(&[s, s]), 0.01, 0.0).unwrap();
        assert!((g.scalar(b.total) - 2.01).abs() < 1e-15);

        assert!(total_loss(&mut g, main, bal, Some(&[]), 0.0, 0.01).is_err());
        assert!(total_loss(&mut g, main, bal, None, -0.1, 0.01).is_err());
    }

    #[test]
    fn smar_is_layer_mean() {
        let mut g = Graph::new();
        let main = g.scalar_constant(0.0);
        let bal = g.scalar_constant(0.0);
        let a = g.scalar_constant(0.2);
        let b = g.scalar_constant(0.6);
        let bundle = total_loss(&mut g, main, bal, Some(&[a, b]), 0.0, 1.0).unwrap();
        assert!((g.scalar(bundle.smar) - 0.4).abs() < 1e-15);
    }

    fn outcome(g: &mut Graph, probs: Matrix, k: usize) -> RoutingOutcome {
        let selected: Vec<Vec<usize>> = probs
            .rows()
            .into_iter()
            .map(|r| crate::router::top_k_select(r.as_slice().unwrap(), k).unwrap().indices)
            .collect();
        let experts = probs.ncols();
        let p = g.constant(probs);
        RoutingOutcome {
            logits: p,
            probs: p,
            weights: p,
            selected,
            k,
            experts,
        }
    }

    #[test]
    fn balance_is_one_when_uniform() {
        let mut g = Graph::new();
        let o = outcome(&mut g, Matrix::from_elem((4, 4), 0.25), 1);
        let l = load_balance_loss(&mut g, &o).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 1e-15);
        assert_eq!(selection_fractions(&o), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn balance_can_drop_below_one() {
        // E = 3, K = 1: f = [1/2, 1/2, 0], mean p = [0.2755, 0.2755, 0.449]
        let mut g = Graph::new();
        let o = outcome(&mut g, array![[0.451, 0.1, 0.449], [0.1, 0.451, 0.449]], 1);
        let l = load_balance_loss(&mut g, &o).unwrap();
        assert!((g.scalar(l) - 0.8265).abs() < 1e-12);
    }
}
