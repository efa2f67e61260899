//! Folding norm scales and fusing rotations leaves the full-precision
//! model's outputs unchanged.
//!
//! cargo run --example invariance

use kurtail::toyformer::{
    fold_rmsnorm, fuse_rotations, invariance_report, markov_corpus, DecoderModel, ModelConfig, RotationSet,
    SyntheticModel,
};

fn main() -> kurtail::Result<()> {
    let config = ModelConfig {
        d_model: 64,
        n_heads: 4,
        d_ff: 128,
        n_layers: 3,
        vocab_size: 128,
        ..ModelConfig::default()
    };
    let model = DecoderModel::synthetic(&SyntheticModel {
        config: config.clone(),
        seed: 4,
        outliers: None,
        random_norm_scales: true,
    })?;
    let inputs = markov_corpus(8, 24, config.vocab_size, 5);

    let folded = fold_rmsnorm(&model)?;
    println!("folded norms:              {:.2e}", invariance_report(&model, &folded, &inputs)?);
    for (name, rot) in [
        ("random R1/R2", RotationSet::random(&config, 6)?),
        ("hadamard R1/R2", RotationSet::hadamard(&config, 6)?),
        ("hadamard + online R3-R5", RotationSet::hadamard(&config, 6)?.with_online(6)),
    ] {
        let fused = fuse_rotations(&folded, &rot)?;
        println!("{:<27}{:.2e}", format!("{name}:"), invariance_report(&model, &fused, &inputs)?);
    }
    Ok(())
}
