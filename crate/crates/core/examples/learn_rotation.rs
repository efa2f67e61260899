//! Learn R1 on captured block inputs of a small outlier model and compare
//! kurtosis and quantization sensitivity against a randomized Hadamard
//! rotation.
//!
//! cargo run --example learn_rotation

use kurtail::pipeline::{capture_activations, kurtosis_table, mean_gamma, rotated_view, sensitivity_table, BLOCK_INPUTS};
use kurtail::quant::Condition;
use kurtail::rotor::{train_r1, RotationInit, RotationTrainConfig};
use kurtail::toyformer::{fold_rmsnorm, markov_corpus, DecoderModel, ModelConfig, OutlierPlan, RotationSet, SyntheticModel};

fn main() -> kurtail::Result<()> {
    let config = ModelConfig {
        d_model: 64,
        n_heads: 4,
        d_ff: 128,
        n_layers: 2,
        vocab_size: 256,
        ..ModelConfig::default()
    };
    let model = fold_rmsnorm(&DecoderModel::synthetic(&SyntheticModel {
        config: config.clone(),
        seed: 1,
        outliers: Some(OutlierPlan::default()),
        random_norm_scales: true,
    })?)?;
    let acts = capture_activations(&model, &markov_corpus(32, 32, config.vocab_size, 2), "example", None)?;

    let trained = train_r1(
        &acts,
        &RotationTrainConfig {
            seed: 3,
            init: RotationInit::RandomizedHadamard,
            ..RotationTrainConfig::default()
        },
    )?;
    println!("R1 loss {:.4} -> {:.4}", trained.log.initial_loss, trained.log.final_loss);

    let identity = RotationSet::identity(&config);
    let hadamard = RotationSet::hadamard(&config, 3)?;
    let learned = RotationSet {
        r1: trained.rotation,
        ..RotationSet::identity(&config)
    };
    let base = rotated_view(&acts, &identity)?;
    println!("{:<6}{:<14}{:>10}{:>10}{:>10}", "layer", "block", "vanilla", "hadamard", "learned");
    let had = kurtosis_table(&base, &rotated_view(&acts, &hadamard)?)?;
    let ours = kurtosis_table(&base, &rotated_view(&acts, &learned)?)?;
    for (h, k) in had.iter().zip(&ours).filter(|(h, _)| BLOCK_INPUTS.contains(&h.block)) {
        println!("{:<6}{:<14}{:>10.2}{:>10.2}{:>10.2}", h.layer, h.block.as_str(), h.before, h.after, k.after);
    }

    let alphas = [0.8, 1.0, 1.2];
    let conditions = [
        (Condition::Vanilla, &identity),
        (Condition::Hadamard, &hadamard),
        (Condition::Kurtail, &learned),
    ];
    let reports = sensitivity_table(&acts, &conditions, 4, &alphas)?;
    for alpha in [0.8, 1.2] {
        let g = |c| mean_gamma(&reports, c, alpha, &BLOCK_INPUTS).unwrap_or(f64::NAN);
        println!(
            "mean Γ at α={alpha}: vanilla {:.4}, hadamard {:.4}, learned {:.4}",
            g(Condition::Vanilla),
            g(Condition::Hadamard),
            g(Condition::Kurtail)
        );
    }
    Ok(())
}
