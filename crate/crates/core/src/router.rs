//! Top-K router with per-modality logit bias.
//!
//! Logits are `C·W_g` plus the bias row of each token's modality. The
//! softmax over experts gives the routing probabilities; the `K` most
//! probable experts are kept and their probabilities renormalised to sum
//! to one. The selected index set is treated as a constant when
//! differentiating, so gradients reach the gate and biases only through
//! the renormalised weights and probabilities.

use rand::Rng;

use crate::autodiff::{Graph, Matrix, Tensor};
use crate::error::{Error, Result};
use crate::modality::ModalityLayout;

#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams {
    /// `H×E` linear gate.
    pub gate: Matrix,
    /// `1×E` logit offset for vision tokens.
    pub bias_vision: Matrix,
    /// `1×E` logit offset for text tokens.
    pub bias_text: Matrix,
    pub modality_bias: bool,
}

impl RouterParams {
    /// Router with zero biases.
    pub fn new(gate: Matrix, modality_bias: bool) -> Result<Self> {
        let experts = gate.ncols();
        if experts == 0 || gate.nrows() == 0 {
            return Err(Error::Parameter(format!(
                "router gate must be non-empty, got {:?}",
                gate.dim()
            )));
        }
        if gate.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("router gate has non-finite entries".into()));
        }
        Ok(Self {
            gate,
            bias_vision: Matrix::zeros((1, experts)),
            bias_text: Matrix::zeros((1, experts)),
            modality_bias,
        })
    }

    /// Gate drawn from `U(-1/√H, 1/√H)`, biases zero.
    pub fn init<R: Rng>(hidden: usize, experts: usize, modality_bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let gate = Matrix::from_shape_fn((hidden, experts), |_| rng.random_range(-bound..bound));
        Self {
            gate,
            bias_vision: Matrix::zeros((1, experts)),
            bias_text: Matrix::zeros((1, experts)),
            modality_bias,
        }
    }

    pub fn experts(&self) -> usize {
        self.gate.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.gate.nrows()
    }

    /// Registers the router's parameters on `g`. Biases are only bound
    /// when the modality bias is enabled.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> RouterVars {
        let gate = g.leaf(self.gate.clone(), trainable);
        let bias = self.modality_bias.then(|| ModalityBias {
            vision: g.leaf(self.bias_vision.clone(), trainable),
            text: g.leaf(self.bias_text.clone(), trainable),
        });
        RouterVars { gate, bias }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModalityBias {
    pub vision: Tensor,
    pub text: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct RouterVars {
    pub gate: Tensor,
    pub bias: Option<ModalityBias>,
}

#[derive(Clone, Debug)]
pub struct RoutingOutcome {
    pub logits: Tensor,
    pub probs: Tensor,
    /// Renormalised top-K weights, zero outside each token's selection.
    pub weights: Tensor,
    /// Selected experts per token, most probable first.
    pub selected: Vec<Vec<usize>>,
    pub k: usize,
    pub experts: usize,
}

impl RoutingOutcome {
    /// Tokens whose selection contains `expert`, in row order.
    pub fn tokens_for(&self, expert: usize) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter(|(_, s)| s.contains(&expert))
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of selections per expert.
    pub fn selection_counts(&self, tokens: impl IntoIterator<Item = usize>) -> Vec<usize> {
        let mut counts = vec![0; self.experts];
        for i in tokens {
            for &e in &self.selected[i] {
                counts[e] += 1;
            }
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Picks the `k` largest entries of a probability row, breaking ties by the
/// lower expert index, and renormalises them.
pub fn top_k_select(p_row: &[f64], k: usize) -> Result<TopK> {
    let e = p_row.len();
    if k == 0 || k > e {
        return Err(Error::Parameter(format!("top-k with k={k} over {e} experts")));
    }
    let total: f64 = p_row.iter().sum();
    if !((total - 1.0).abs() <= 1e-9) || p_row.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Input(format!(
            "probability row must be non-negative and sum to 1, sums to {total}"
        )));
    }
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&a, &b| p_row[b].total_cmp(&p_row[a]).then(a.cmp(&b)));
    order.truncate(k);
    let mass: f64 = order.iter().map(|&i| p_row[i]).sum();
    let mut weights = vec![0.0; e];
    for &i in &order {
        weights[i] = p_row[i] / mass;
    }
    Ok(TopK {
        indices: order,
        weights,
    })
}

/// Routes every token of `hidden` (`N×H`) to its top-`k` experts.
pub fn route(
    g: &mut Graph,
    vars: &RouterVars,
    hidden: Tensor,
    layout: &ModalityLayout,
    k: usize,
) -> Result<RoutingOutcome> {
    let experts = vars.gate.cols();
    let n = hidden.rows();
    if n == 0 || layout.is_empty() {
        return Err(Error::Input("routing a batch with zero tokens".into()));
    }
    if layout.len() != n {
        return Err(Error::dim(
            "route",
            format!("{} modality labels for {n} tokens", layout.len()),
        ));
    }
    if k == 0 || k > experts {
        return Err(Error::Parameter(format!("k={k} must be in 1..={experts}")));
    }

    let mut logits = g.matmul(hidden, vars.gate)?;
    if let Some(bias) = vars.bias {
        let table = g.concat_rows(&[bias.vision, bias.text])?;
        let per_token = g.gather_rows(table, &layout.modality_rows())?;
        logits = g.add(logits, per_token)?;
    }
    let probs = g.row_softmax(logits)?;

    let mut mask = Matrix::zeros((n, experts));
    let mut selected = Vec::with_capacity(n);
    for (i, row) in g.value(probs).rows().into_iter().enumerate() {
        let top = top_k_select(row.as_slice().expect("standard layout"), k)?;
        for &e in &top.indices {
            mask[[i, e]] = 1.0;
        }
        selected.push(top.indices);
    }
    let mask = g.constant(mask);
    let kept = g.mul(probs, mask)?;
    let mass = g.row_sum(kept);
    let inv = g.recip(mass)?;
    let weights = g.mul_col(kept, inv)?;

    Ok(RoutingOutcome {
        logits,
        probs,
        weights,
        selected,
        k,
        experts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::Modality::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top_k_example_rows() {
        let t = top_k_select(&[0.4, 0.3, 0.2, 0.1], 2).unwrap();
        assert_eq!(t.indices, vec![0, 1]);
        assert!((t.weights[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((t.weights[1] - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(&t.weights[2..], &[0.0, 0.0]);

        let t = top_k_select(&[0.25; 4], 2).unwrap();
        assert_eq!(t.indices, vec![0, 1]);
        assert_eq!(t.weights, vec![0.5, 0.5, 0.0, 0.0]);

        let t = top_k_select(&[0.1, 0.7, 0.2], 1).unwrap();
        assert_eq!(t.indices, vec![1]);
        assert_eq!(t.weights, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn top_k_rejects_bad_k_and_rows() {
        assert!(matches!(top_k_select(&[0.5, 0.5], 3), Err(Error::Parameter(_))));
        assert!(matches!(top_k_select(&[0.5, 0.5], 0), Err(Error::Parameter(_))));
        assert!(top_k_select(&[0.5, 0.6], 1).is_err());
    }

    fn layout(labels: &[crate::modality::Modality]) -> ModalityLayout {
        ModalityLayout::new(labels.to_vec()).unwrap()
    }

    #[test]
    fn k_equal_e_keeps_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = RouterParams::init(5, 4, true, &mut rng);
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let h = g.constant(Matrix::from_shape_fn((6, 5), |(i, j)| (i * 5 + j) as f64 * 0.1 - 1.0));
        let lay = layout(&[Vision, Text, Vision, Text, Text, Vision]);
        let out = route(&mut g, &vars, h, &lay, 4).unwrap();
        let p = g.value(out.probs);
        let w = g.value(out.weights);
        for (a, b) in p.iter().zip(w.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn vision_bias_steers_vision_tokens() {
        let mut params = RouterParams::new(Matrix::zeros((3, 4)), true).unwrap();
        params.bias_vision = array![[10.0, 0.0, 0.0, 0.0]];
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let h = g.constant(Matrix::ones((4, 3)));
        let lay = layout(&[Vision, Text, Vision, Text]);
        let out = route(&mut g, &vars, h, &lay, 1).unwrap();
        let p = g.value(out.probs);
        for i in [0, 2] {
            assert_eq!(out.selected[i], vec![0]);
        }
        for i in [1, 3] {
            for e in 0..4 {
                assert!((p[[i, e]] - 0.25).abs() < 1e-15);
            }
            // uniform row: tie broken to the lowest index
            assert_eq!(out.selected[i], vec![0]);
        }
    }

    #[test]
    fn route_errors() {
        let params = RouterParams::new(Matrix::zeros((2, 3)), false).unwrap();
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let h = g.constant(Matrix::zeros((2, 2)));
        let lay = layout(&[Vision, Text]);
        assert!(matches!(route(&mut g, &vars, h, &lay, 4), Err(Error::Parameter(_))));
        let empty = g.constant(Matrix::zeros((0, 2)));
        assert!(matches!(route(&mut g, &vars, empty, &lay, 1), Err(Error::Input(_))));
    }

    #[test]
    fn disabled_bias_is_not_bound() {
        let params = RouterParams::new(Matrix::zeros((2, 3)), false).unwrap();
        let mut g = Graph::new();
        assert!(params.bind(&mut g, true).bias.is_none());
        assert_eq!(g.len(), 1);
    }
}
