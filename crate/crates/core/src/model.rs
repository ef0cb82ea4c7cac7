//! Toy multimodal MoE classifier: per-modality input projections, a stack
//! of residual MoE feed-forward layers, and a linear class head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Tensor};
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::mrd::{compute_mrd, MrdOutcome};
use crate::router::{route, RouterParams, RouterVars, RoutingOutcome};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim_vision: usize,
    pub dim_text: usize,
    pub hidden: usize,
    pub ffn_hidden: usize,
    pub classes: usize,
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub modality_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim_vision: 16,
            dim_text: 16,
            hidden: 64,
            ffn_hidden: 128,
            classes: 8,
            layers: 4,
            experts: 8,
            top_k: 2,
            modality_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.dim_vision,
            self.dim_text,
            self.hidden,
            self.ffn_hidden,
            self.classes,
            self.layers,
            self.experts,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be >= 1: {self:?}")));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!(
                "top_k={} must be in 1..={}",
                self.top_k, self.experts
            )));
        }
        Ok(())
    }

    /// Closed-form number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden;
        let router = h * self.experts + if self.modality_bias { 2 * self.experts } else { 0 };
        let experts = self.experts * 2 * h * self.ffn_hidden;
        (self.dim_vision + self.dim_text) * h + self.layers * (router + experts) + h * self.classes
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertFfn {
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    pub router: RouterParams,
    pub experts: Vec<ExpertFfn>,
    pub top_k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel {
    config: ModelConfig,
    pub vision_proj: Matrix,
    pub text_proj: Matrix,
    pub layers: Vec<MoeLayer>,
    pub head: Matrix,
}

impl MoeModel {
    /// Weights from `U(−1/√fan_in, 1/√fan_in)`, router biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let vision_proj = uniform(&mut rng, config.dim_vision, h);
        let text_proj = uniform(&mut rng, config.dim_text, h);
        let layers = (0..config.layers)
            .map(|_| {
                let router = RouterParams::init(h, config.experts, config.modality_bias, &mut rng);
                let experts = (0..config.experts)
                    .map(|_| ExpertFfn {
                        w1: uniform(&mut rng, h, config.ffn_hidden),
                        w2: uniform(&mut rng, config.ffn_hidden, h),
                    })
                    .collect();
                MoeLayer {
                    router,
                    experts,
                    top_k: config.top_k,
                }
            })
            .collect();
        let head = uniform(&mut rng, h, config.classes);
        Ok(Self {
            config,
            vision_proj,
            text_proj,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Trainable parameters in a fixed order. Router biases are listed only
    /// when the modality bias is enabled.
    pub fn parameters(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("vision_proj".to_string(), &self.vision_proj),
            ("text_proj".to_string(), &self.text_proj),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.router.gate"), &layer.router.gate));
            if layer.router.modality_bias {
                out.push((format!("layers.{l}.router.bias_vision"), &layer.router.bias_vision));
                out.push((format!("layers.{l}.router.bias_text"), &layer.router.bias_text));
            }
            for (e, ex) in layer.experts.iter().enumerate() {
                out.push((format!("layers.{l}.experts.{e}.w1"), &ex.w1));
                out.push((format!("layers.{l}.experts.{e}.w2"), &ex.w2));
            }
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable view of [`parameters`](Self::parameters), same order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.vision_proj, &mut self.text_proj];
        for layer in &mut self.layers {
            out.push(&mut layer.router.gate);
            if layer.router.modality_bias {
                out.push(&mut layer.router.bias_vision);
                out.push(&mut layer.router.bias_text);
            }
            for ex in &mut layer.experts {
                out.push(&mut ex.w1);
                out.push(&mut ex.w2);
            }
        }
        out.push(&mut self.head);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, m)| m.len()).sum()
    }

    /// Registers all parameters on `g`, trainable or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let mut all = Vec::new();
        let leaf = |g: &mut Graph, m: &Matrix, all: &mut Vec<Tensor>| {
            let t = g.leaf(m.clone(), trainable);
            all.push(t);
            t
        };
        let vision_proj = leaf(g, &self.vision_proj, &mut all);
        let text_proj = leaf(g, &self.text_proj, &mut all);
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let router = layer.router.bind(g, trainable);
            all.push(router.gate);
            if let Some(b) = router.bias {
                all.push(b.vision);
                all.push(b.text);
            }
            let experts = layer
                .experts
                .iter()
                .map(|ex| {
                    let w1 = leaf(g, &ex.w1, &mut all);
                    let w2 = leaf(g, &ex.w2, &mut all);
                    (w1, w2)
                })
                .collect();
            layers.push(LayerVars {
                router,
                experts,
                top_k: layer.top_k,
            });
        }
        let head = leaf(g, &self.head, &mut all);
        ModelVars {
            vision_proj,
            text_proj,
            layers,
            head,
            all,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub router: RouterVars,
    pub experts: Vec<(Tensor, Tensor)>,
    pub top_k: usize,
}

/// Graph handles for a bound model.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub vision_proj: Tensor,
    pub text_proj: Tensor,
    pub layers: Vec<LayerVars>,
    pub head: Tensor,
    /// Same order as [`MoeModel::parameters`].
    pub all: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub routing: RoutingOutcome,
    /// Present when both modalities are in the batch.
    pub mrd: Option<MrdOutcome>,
    /// Layer input, `N×H`.
    pub input: Tensor,
    pub output: Tensor,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub layers: Vec<LayerTrace>,
}

impl LayerVars {
    /// `y_i = x_i + Σ_{e∈T_i} ŵ[i,e]·FFN_e(x_i)`; each expert runs only on
    /// the tokens routed to it.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Tensor,
        batch: &TokenBatch,
    ) -> Result<(Tensor, RoutingOutcome)> {
        let n = x.rows();
        let routing = route(g, &self.router, x, &batch.layout, self.top_k)?;
        let mut y = x;
        for (e, &(w1, w2)) in self.experts.iter().enumerate() {
            let tokens = routing.tokens_for(e);
            if tokens.is_empty() {
                continue;
            }
            let xe = g.gather_rows(x, &tokens)?;
            let h = g.matmul(xe, w1)?;
            let h = g.relu(h);
            let out = g.matmul(h, w2)?;
            let wcol = g.column(routing.weights, e)?;
            let we = g.gather_rows(wcol, &tokens)?;
            let out = g.mul_col(out, we)?;
            let placed = g.scatter_rows(out, &tokens, n)?;
            y = g.add(y, placed)?;
        }
        Ok((y, routing))
    }
}

impl ModelVars {
    /// Projects each modality into the shared hidden space, in token order.
    pub fn embed(&self, g: &mut Graph, batch: &TokenBatch) -> Result<Tensor> {
        let mut parts = Vec::with_capacity(2);
        if batch.vision.nrows() > 0 {
            let xv = g.constant(batch.vision.clone());
            parts.push(g.matmul(xv, self.vision_proj)?);
        }
        if batch.text.nrows() > 0 {
            let xt = g.constant(batch.text.clone());
            parts.push(g.matmul(xt, self.text_proj)?);
        }
        let stacked = g.concat_rows(&parts)?;
        if stacked.rows() != batch.len() {
            return Err(Error::dim(
                "embed",
                format!("{} feature rows for {} tokens", stacked.rows(), batch.len()),
            ));
        }
        g.gather_rows(stacked, &batch.layout.stacked_rows())
    }

    /// Full forward pass. With `track_mrd`, per-layer MRD statistics are
    /// added to the graph whenever both modalities are present.
    pub fn forward(&self, g: &mut Graph, batch: &TokenBatch, track_mrd: bool) -> Result<ForwardOutput> {
        let mut x = self.embed(g, batch)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (y, routing) = layer.forward(g, x, batch)?;
            let mrd = if track_mrd && batch.layout.has_both() {
                Some(compute_mrd(g, &routing, &batch.layout, l)?)
            } else {
                None
            };
            layers.push(LayerTrace {
                routing,
                mrd,
                input: x,
                output: y,
            });
            x = y;
        }
        let logits = g.matmul(x, self.head)?;
        Ok(ForwardOutput { logits, layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_batch, SynthConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            dim_vision: 3,
            dim_text: 5,
            hidden: 6,
            ffn_hidden: 7,
            classes: 4,
            layers: 2,
            experts: 4,
            top_k: 2,
            modality_bias: true,
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for bias in [true, false] {
            let cfg = ModelConfig {
                modality_bias: bias,
                ..small()
            };
            let m = MoeModel::new(cfg.clone(), 1).unwrap();
            // 3*6 + 5*6 + 2*(6*4 + [8] + 4*2*6*7) + 6*4
            let expected = 18 + 30 + 2 * (24 + if bias { 8 } else { 0 } + 336) + 24;
            assert_eq!(m.parameter_count(), expected);
            assert_eq!(cfg.parameter_count(), expected);
        }
    }

    #[test]
    fn bias_disabled_excludes_biases() {
        let m = MoeModel::new(
            ModelConfig {
                modality_bias: false,
                ..small()
            },
            0,
        )
        .unwrap();
        assert!(m.parameters().iter().all(|(n, _)| !n.contains("bias")));
        let m = MoeModel::new(small(), 0).unwrap();
        assert_eq!(m.parameters().iter().filter(|(n, _)| n.contains("bias")).count(), 4);
    }

    #[test]
    fn same_seed_same_init() {
        assert_eq!(MoeModel::new(small(), 9).unwrap(), MoeModel::new(small(), 9).unwrap());
        assert_ne!(MoeModel::new(small(), 9).unwrap(), MoeModel::new(small(), 10).unwrap());
    }

    #[test]
    fn invalid_config() {
        assert!(MoeModel::new(ModelConfig { top_k: 5, ..small() }, 0).is_err());
        assert!(MoeModel::new(ModelConfig { layers: 0, ..small() }, 0).is_err());
    }

    #[test]
    fn parameters_mut_aligns_with_parameters() {
        let mut m = MoeModel::new(small(), 2).unwrap();
        let shapes: Vec<_> = m.parameters().iter().map(|(_, p)| p.dim()).collect();
        let shapes_mut: Vec<_> = m.parameters_mut().iter().map(|p| p.dim()).collect();
        assert_eq!(shapes, shapes_mut);
        let mut g = Graph::new();
        let vars = m.bind(&mut g, true);
        assert_eq!(vars.all.len(), shapes.len());
    }

    #[test]
    fn zero_expert_output_is_identity() {
        let mut m = MoeModel::new(small(), 4).unwrap();
        for layer in &mut m.layers {
            for ex in &mut layer.experts {
                ex.w2.fill(0.0);
            }
        }
        let data = SynthConfig {
            dim_vision: 3,
            dim_text: 5,
            tokens_per_batch: 10,
            classes: 4,
            ..Default::default()
        };
        let batch = generate_batch(&data, 0).unwrap();
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let out = vars.forward(&mut g, &batch, true).unwrap();
        for t in &out.layers {
            assert_eq!(g.value(t.input), g.value(t.output));
        }
    }

    #[test]
    fn wrong_feature_dims_error() {
        let m = MoeModel::new(small(), 4).unwrap();
        let data = SynthConfig {
            dim_vision: 4,
            dim_text: 5,
            classes: 4,
            ..Default::default()
        };
        let batch = generate_batch(&data, 0).unwrap();
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        assert!(matches!(vars.forward(&mut g, &batch, false), Err(Error::Dimension { .. })));
    }
}
