mod common;

use common::*;
use rand::Rng;
use smar_core::checkpoint::Checkpoint;
use smar_core::data::{SynthConfig, SynthGenerator, TokenBatch};
use smar_core::model::{ModelConfig, MoeModel};
use smar_core::{Graph, Matrix, Modality, TrainConfig};

fn forward(model: &MoeModel, batch: &TokenBatch) -> Matrix {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let out = vars.forward(&mut g, batch, true).unwrap();
    g.value(out.logits).clone()
}

fn synth(seed: u64, n: usize, cfg: &ModelConfig) -> SynthGenerator {
    SynthGenerator::new(SynthConfig {
        seed,
        vision_fraction: 0.5,
        tokens_per_batch: n,
        dim_vision: cfg.dim_vision,
        dim_text: cfg.dim_text,
        classes: cfg.classes,
        clusters_per_modality: 4,
        cluster_spread: 1.0,
        cluster_distance: 1.0,
    })
    .unwrap()
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[test]
fn sparse_dispatch_equals_dense_masked_computation() {
    let cfg = ModelConfig {
        dim_vision: 3,
        dim_text: 2,
        hidden: 6,
        ffn_hidden: 5,
        classes: 3,
        layers: 2,
        experts: 4,
        top_k: 2,
        modality_bias: true,
    };
    for seed in 0..50 {
        let mut model = MoeModel::new(cfg.clone(), seed).unwrap();
        let mut r = rng(seed);
        for layer in &mut model.layers {
            layer.router.bias_vision = random_matrix(&mut r, 1, 4, 1.0);
            layer.router.bias_text = random_matrix(&mut r, 1, 4, 1.0);
        }
        let batch = synth(seed, 8, &cfg).batch(seed);
        let diff = max_abs_diff(&forward(&model, &batch), &dense_forward(&model, &batch));
        assert!(diff < 1e-9, "seed {seed}: {diff}");
    }
}

#[test]
fn single_expert_layer_is_a_residual_ffn() {
    let cfg = ModelConfig {
        dim_vision: 2,
        dim_text: 3,
        hidden: 4,
        ffn_hidden: 5,
        classes: 2,
        layers: 1,
        experts: 1,
        top_k: 1,
        modality_bias: false,
    };
    let model = MoeModel::new(cfg.clone(), 3).unwrap();
    let batch = synth(3, 6, &cfg).batch(0);
    let ex = &model.layers[0].experts[0];
    let mut expected = Matrix::zeros((6, 2));
    for i in 0..6 {
        let f = ndarray::Array1::from(batch.features(i));
        let x = match batch.layout.labels()[i] {
            Modality::Vision => f.dot(&model.vision_proj),
            Modality::Text => f.dot(&model.text_proj),
        };
        let y = &x + &x.dot(&ex.w1).mapv(|v| v.max(0.0)).dot(&ex.w2);
        expected.row_mut(i).assign(&y.dot(&model.head));
    }
    assert!(max_abs_diff(&forward(&model, &batch), &expected) < 1e-12);
}

#[test]
fn duplicated_tokens_get_identical_outputs() {
    let cfg = TrainConfig::default().model_config();
    let model = MoeModel::new(cfg.clone(), 11).unwrap();
    let batch = synth(11, 10, &cfg).batch(4);
    let doubled = batch.repeat_tokens(2).unwrap();
    let out = forward(&model, &doubled);
    let single = forward(&model, &batch);
    for i in 0..batch.len() {
        assert_eq!(out.row(2 * i), out.row(2 * i + 1));
        let d = (&out.row(2 * i) - &single.row(i)).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(d < 1e-12);
    }
}

#[test]
fn parameter_count_matches_enumerated_parameters() {
    let mut r = rng(8);
    for _ in 0..20 {
        let cfg = ModelConfig {
            dim_vision: r.random_range(1..6),
            dim_text: r.random_range(1..6),
            hidden: r.random_range(1..6),
            ffn_hidden: r.random_range(1..6),
            classes: r.random_range(2..5),
            layers: r.random_range(1..4),
            experts: r.random_range(1..5),
            top_k: 1,
            modality_bias: r.random_bool(0.5),
        };
        let model = MoeModel::new(cfg.clone(), 0).unwrap();
        let enumerated: usize = model.parameters().iter().map(|(_, m)| m.len()).sum();
        assert_eq!(enumerated, cfg.parameter_count());
        let has_bias = model.parameters().iter().any(|(n, _)| n.contains("bias"));
        assert_eq!(has_bias, cfg.modality_bias);
    }
}

#[test]
fn checkpoint_file_round_trip_preserves_forward_pass() {
    let cfg = TrainConfig {
        layers: 2,
        experts: 4,
        hidden: 8,
        ffn_hidden: 8,
        ..TrainConfig::default()
    };
    let mut model = MoeModel::new(cfg.model_config(), 4).unwrap();
    model.layers[1].router.bias_vision[[0, 2]] = 0.25;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::from_model(&cfg, &model)
        .write(std::fs::File::create(&path).unwrap())
        .unwrap();
    let (cfg2, model2) = Checkpoint::read(std::fs::File::open(&path).unwrap())
        .unwrap()
        .into_model()
        .unwrap();
    assert_eq!(cfg2, cfg);
    let batch = SynthGenerator::new(cfg.synth_config()).unwrap().batch(0);
    assert_eq!(forward(&model, &batch), forward(&model2, &batch));
}
