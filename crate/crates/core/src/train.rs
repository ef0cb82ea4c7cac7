//! SGD-with-momentum training loop, evaluation and parameter sweeps.

use log::{debug, info};

use crate::autodiff::{Graph, Matrix, Tensor};
use crate::config::TrainConfig;
use crate::data::{SynthGenerator, TokenBatch};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::{cross_entropy, load_balance_loss, smar_loss, total_loss, SmarBand};
use crate::metrics::{LayerMetrics, LossValues, StepMetrics, METRICS_SCHEMA_VERSION};
use crate::model::{ForwardOutput, MoeModel};
use crate::modality::Modality;
use crate::mrd::{selection_frequency, stats_from_values};

/// Evaluation batches are drawn from this stream offset so they never
/// coincide with training steps.
pub const EVAL_STEP_OFFSET: u64 = 1 << 40;

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub model: MoeModel,
    pub metrics: Vec<StepMetrics>,
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best == label
        })
        .count();
    hits as f64 / labels.len() as f64
}

struct Objective {
    values: LossValues,
    per_layer_smar: Vec<f64>,
    total: Tensor,
}

/// Builds the loss for one forward pass. `smar` / `balance` say whether
/// those terms enter the objective; inactive terms are logged as 0.
fn objective(
    g: &mut Graph,
    out: &ForwardOutput,
    batch: &TokenBatch,
    cfg: &TrainConfig,
    band: SmarBand,
    smar: bool,
    balance: bool,
) -> Result<Objective> {
    let main = cross_entropy(g, out.logits, &batch.labels)?;

    let balance_t = if balance {
        let mut terms = Vec::with_capacity(out.layers.len());
        for layer in &out.layers {
            terms.push(load_balance_loss(g, &layer.routing)?);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        g.scale(acc, 1.0 / terms.len() as f64)
    } else {
        g.scalar_constant(0.0)
    };

    let mut per_layer_smar = vec![0.0; out.layers.len()];
    let mut smar_terms = Vec::new();
    if smar {
        for (l, layer) in out.layers.iter().enumerate() {
            if let Some(mrd) = &layer.mrd {
                let t = smar_loss(g, mrd.distance, band)?;
                per_layer_smar[l] = g.scalar(t);
                smar_terms.push(t);
            }
        }
    }
    let smar_arg = (!smar_terms.is_empty()).then_some(smar_terms.as_slice());
    let bundle = total_loss(g, main, balance_t, smar_arg, cfg.alpha, cfg.beta)?;
    Ok(Objective {
        values: LossValues {
            main: g.scalar(bundle.main),
            balance: g.scalar(bundle.balance),
            smar: g.scalar(bundle.smar),
            total: g.scalar(bundle.total),
        },
        per_layer_smar,
        total: bundle.total,
    })
}

fn layer_metrics(
    g: &Graph,
    out: &ForwardOutput,
    batch: &TokenBatch,
    per_layer_smar: &[f64],
) -> Result<Vec<LayerMetrics>> {
    let layout = &batch.layout;
    let shares = |routing, m: Modality| {
        let tokens = layout.indices(m);
        if tokens.is_empty() {
            vec![0.0; out.layers[0].routing.experts]
        } else {
            selection_frequency(routing, tokens)
        }
    };
    out.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let d = match &layer.mrd {
                Some(mrd) => Some(mrd.stats.d_sym_kl),
                None if layout.has_both() => Some(
                    stats_from_values(
                        &layer.routing.selected,
                        g.value(layer.routing.weights),
                        layer.routing.k,
                        layout,
                        l,
                    )?
                    .d_sym_kl,
                ),
                None => None,
            };
            Ok(LayerMetrics {
                layer: l,
                d_sym_kl: d,
                smar: per_layer_smar[l],
                expert_shares_vision: shares(&layer.routing, Modality::Vision),
                expert_shares_text: shares(&layer.routing, Modality::Text),
            })
        })
        .collect()
}

/// Stateful trainer; one [`step`](Trainer::step) is one optimizer update.
pub struct Trainer {
    cfg: TrainConfig,
    band: SmarBand,
    model: MoeModel,
    velocity: Vec<Matrix>,
    data: SynthGenerator,
    step: usize,
    track_mrd: bool,
    last_logged: Option<StepMetrics>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = MoeModel::new(cfg.model_config(), cfg.seed)?;
        Self::from_model(cfg, model)
    }

    /// Continues training an existing model.
    pub fn from_model(cfg: TrainConfig, model: MoeModel) -> Result<Self> {
        cfg.validate()?;
        if model.config() != &cfg.model_config() {
            return Err(Error::Config("model does not match the training config".into()));
        }
        let velocity = model
            .parameters()
            .iter()
            .map(|(_, p)| Matrix::zeros(p.dim()))
            .collect();
        Ok(Self {
            band: cfg.band()?,
            data: SynthGenerator::new(cfg.synth_config())?,
            cfg,
            model,
            velocity,
            step: 0,
            track_mrd: true,
            last_logged: None,
        })
    }

    /// Runs without putting MRD statistics on the gradient graph: a plain
    /// top-K MoE. Logged distances are computed from routing values instead.
    /// Fails at the first step where the band penalty would be active.
    pub fn without_mrd_graph(mut self) -> Self {
        self.track_mrd = false;
        self
    }

    pub fn model(&self) -> &MoeModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    fn should_log(&self, step: usize) -> bool {
        step.is_multiple_of(self.cfg.log_every) || step + 1 == self.cfg.steps
    }

    /// One forward/backward pass and parameter update.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let batch = self.data.batch(step as u64);
        let smar = self.cfg.smar_active(step);
        if smar && !self.track_mrd {
            return Err(Error::Config(
                "band penalty is active but MRD is not on the graph".into(),
            ));
        }

        let mut g = Graph::new();
        let vars = self.model.bind(&mut g, true);
        let forward = vars.forward(&mut g, &batch, self.track_mrd).and_then(|out| {
            let obj = objective(
                &mut g,
                &out,
                &batch,
                &self.cfg,
                self.band,
                smar,
                self.cfg.balance_active(),
            )?;
            Ok((out, obj))
        });
        let (out, obj) = match forward {
            Ok(v) => v,
            Err(Error::Numeric { .. }) => {
                return Err(Error::NonFinite {
                    step,
                    last_metrics: self.last_logged.take().map(Box::new),
                })
            }
            Err(e) => return Err(e),
        };

        let metrics = StepMetrics {
            schema_version: METRICS_SCHEMA_VERSION,
            step,
            losses: obj.values,
            per_layer: layer_metrics(&g, &out, &batch, &obj.per_layer_smar)?,
            accuracy: accuracy(g.value(out.logits), &batch.labels),
            n_vision: batch.layout.count(Modality::Vision),
            n_text: batch.layout.count(Modality::Text),
            top_k: self.cfg.top_k,
        };
        if !obj.values.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                last_metrics: self.last_logged.take().map(Box::new),
            });
        }

        g.backward(obj.total)?;
        let lr = self.cfg.learning_rate;
        let mu = self.cfg.momentum;
        for ((param, vel), t) in self
            .model
            .parameters_mut()
            .into_iter()
            .zip(&mut self.velocity)
            .zip(&vars.all)
        {
            if let Some(grad) = g.grad(*t) {
                vel.zip_mut_with(grad, |v, &d| *v = mu * *v + d);
            } else {
                vel.mapv_inplace(|v| mu * v);
            }
            param.scaled_add(-lr, vel);
        }
        self.step += 1;
        Ok(metrics)
    }

    /// Trains for the configured number of steps, logging every
    /// `log_every` steps and at the final step.
    pub fn run(mut self) -> Result<TrainRun> {
        let mut log = Vec::new();
        while self.step < self.cfg.steps {
            let step = self.step;
            let m = self.step()?;
            if self.should_log(step) {
                debug!(
                    "step {step}: total {:.5} main {:.5} smar {:.5} acc {:.3}",
                    m.losses.total, m.losses.main, m.losses.smar, m.accuracy
                );
                self.last_logged = Some(m.clone());
                log.push(m);
            }
        }
        info!("finished {} steps", self.cfg.steps);
        Ok(TrainRun {
            config: self.cfg,
            model: self.model,
            metrics: log,
        })
    }
}

pub fn train(cfg: &TrainConfig) -> Result<TrainRun> {
    Trainer::new(cfg.clone())?.run()
}

/// Trains several configurations independently.
pub fn sweep(configs: Vec<TrainConfig>, exec: Execution) -> Vec<Result<TrainRun>> {
    exec.map(configs, |cfg| train(&cfg))
}

/// Per-batch evaluation records (`step` is the batch index).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<StepMetrics>,
}

impl EvalReport {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean task accuracy, `None` for an empty report.
    pub fn accuracy(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        Some(self.records.iter().map(|r| r.accuracy).sum::<f64>() / self.records.len() as f64)
    }

    /// `d_sym-KL` values per layer across batches.
    pub fn distances(&self) -> Vec<Vec<f64>> {
        let layers = self.records.first().map_or(0, |r| r.per_layer.len());
        (0..layers)
            .map(|l| {
                self.records
                    .iter()
                    .filter_map(|r| r.per_layer[l].d_sym_kl)
                    .collect()
            })
            .collect()
    }

    /// Mean distance per layer.
    pub fn mean_distances(&self) -> Vec<f64> {
        self.distances()
            .iter()
            .map(|d| d.iter().sum::<f64>() / d.len().max(1) as f64)
            .collect()
    }
}

/// Evaluates one held-out batch without recording gradients.
pub fn evaluate_batch(model: &MoeModel, cfg: &TrainConfig, batch: &TokenBatch, index: usize) -> Result<StepMetrics> {
    let band = cfg.band()?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let out = vars.forward(&mut g, batch, true)?;
    let obj = objective(&mut g, &out, batch, cfg, band, cfg.beta > 0.0, cfg.balance_active())?;
    Ok(StepMetrics {
        schema_version: METRICS_SCHEMA_VERSION,
        step: index,
        losses: obj.values,
        per_layer: layer_metrics(&g, &out, batch, &obj.per_layer_smar)?,
        accuracy: accuracy(g.value(out.logits), &batch.labels),
        n_vision: batch.layout.count(Modality::Vision),
        n_text: batch.layout.count(Modality::Text),
        top_k: cfg.top_k,
    })
}

/// Evaluates `n_batches` held-out batches. Pure: repeated calls agree
/// bit-for-bit regardless of `exec`.
pub fn evaluate(model: &MoeModel, cfg: &TrainConfig, n_batches: usize, exec: Execution) -> Result<EvalReport> {
    let data = SynthGenerator::new(cfg.synth_config())?;
    let results = exec.map((0..n_batches).collect(), |b| {
        let batch = data.batch(EVAL_STEP_OFFSET + b as u64);
        evaluate_batch(model, cfg, &batch, b)
    });
    Ok(EvalReport {
        records: results.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> TrainConfig {
        TrainConfig {
            layers: 2,
            experts: 4,
            hidden: 8,
            ffn_hidden: 8,
            dim_vision: 4,
            dim_text: 4,
            classes: 4,
            clusters_per_modality: 4,
            batch_size: 16,
            steps: 6,
            log_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn accuracy_counts_argmax() {
        let logits = array![[0.1, 0.9], [0.8, 0.2], [0.3, 0.7]];
        assert!((accuracy(&logits, &[1, 0, 0]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn logs_on_schedule_and_last_step() {
        let run = train(&tiny()).unwrap();
        let steps: Vec<_> = run.metrics.iter().map(|m| m.step).collect();
        assert_eq!(steps, vec![0, 2, 4, 5]);
        assert!(run.metrics.iter().all(|m| m.is_finite()));
    }

    #[test]
    fn empty_evaluation() {
        let cfg = tiny();
        let model = MoeModel::new(cfg.model_config(), 0).unwrap();
        let r = evaluate(&model, &cfg, 0, Execution::default()).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.accuracy(), None);
        assert!(r.distances().is_empty());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let cfg = tiny();
        let mut model = MoeModel::new(cfg.model_config(), 0).unwrap();
        model.head.fill(f64::INFINITY);
        let mut trainer = Trainer::from_model(cfg, model).unwrap();
        assert!(matches!(trainer.step(), Err(Error::NonFinite { step: 0, .. })));
    }

    #[test]
    fn plain_path_refuses_active_penalty() {
        let mut t = Trainer::new(tiny()).unwrap().without_mrd_graph();
        assert!(matches!(t.step(), Err(Error::Config(_))));
    }
}
