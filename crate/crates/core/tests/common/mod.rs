#![allow(dead_code)]

use kurtail::pipeline::{capture_activations, learn_rotations};
use kurtail::rotor::{ActivationSet, RotationInit, RotationTrainConfig};
use kurtail::toyformer::{
    fold_rmsnorm, markov_corpus, DecoderModel, ModelConfig, OutlierPlan, RotationSet, SyntheticModel,
};

pub fn toy_config(d_model: usize, n_layers: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        n_heads: 4,
        d_ff: 2 * d_model,
        n_layers,
        vocab_size: 256,
        ..ModelConfig::default()
    }
}

/// Planted-outlier synthetic model with norm scales folded.
pub fn outlier_model(config: &ModelConfig, seed: u64) -> DecoderModel {
    let m = DecoderModel::synthetic(&SyntheticModel {
        config: config.clone(),
        seed,
        outliers: Some(OutlierPlan::default()),
        random_norm_scales: true,
    })
    .unwrap();
    fold_rmsnorm(&m).unwrap()
}

pub fn corpus(model: &DecoderModel, count: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    markov_corpus(count, len, model.config.vocab_size, seed)
}

pub fn capture(model: &DecoderModel, seqs: &[Vec<usize>]) -> ActivationSet {
    capture_activations(model, seqs, "test", None).unwrap()
}

pub fn train_config(seed: u64) -> RotationTrainConfig {
    RotationTrainConfig {
        seed,
        init: RotationInit::RandomizedHadamard,
        ..RotationTrainConfig::default()
    }
}

/// Learned R1/R2 with online R3–R5 on.
pub fn learned(acts: &ActivationSet, seed: u64) -> RotationSet {
    learn_rotations(acts, &train_config(seed)).unwrap().0.with_online(seed)
}

pub struct Toy {
    pub model: DecoderModel,
    pub calibration: Vec<Vec<usize>>,
    pub evaluation: Vec<Vec<usize>>,
    pub acts: ActivationSet,
}

/// The standard experiment setup: a 64-wide two-layer outlier model,
/// 32 calibration and 32 evaluation sequences of 32 tokens.
pub fn toy(seed: u64) -> Toy {
    let model = outlier_model(&toy_config(64, 2), seed);
    let calibration = corpus(&model, 32, 32, seed + 1000);
    let evaluation = corpus(&model, 32, 32, seed + 2000);
    let acts = capture(&model, &calibration);
    Toy {
        model,
        calibration,
        evaluation,
        acts,
    }
}
