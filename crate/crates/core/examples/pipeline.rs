//! The whole flow on a small synthetic model: capture, learn rotations,
//! fuse, quantize (GPTQ W4A4KV4) and evaluate against no rotation.
//!
//! cargo run --example pipeline [out_dir]

use kurtail::pipeline::{run_pipeline, CorpusConfig, CorpusKind, ModelSource, RotationMethod, RunConfig};
use kurtail::toyformer::{ModelConfig, OutlierPlan};

fn main() -> kurtail::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    let mut config = RunConfig {
        model: ModelSource::Synthetic {
            config: ModelConfig {
                d_model: 64,
                n_heads: 4,
                d_ff: 128,
                n_layers: 2,
                vocab_size: 256,
                ..ModelConfig::default()
            },
            outliers: Some(OutlierPlan::default()),
            random_norm_scales: true,
        },
        calibration: CorpusConfig {
            kind: CorpusKind::Markov,
            sample_count: 32,
            sequence_length: 32,
        },
        evaluation: CorpusConfig {
            kind: CorpusKind::Markov,
            sample_count: 32,
            sequence_length: 32,
        },
        ..RunConfig::default()
    };

    println!("{:<10}{:>14}{:>14}{:>12}", "rotation", "output MSE", "invariance", "success %");
    for method in [RotationMethod::None, RotationMethod::Hadamard, RotationMethod::Kurtail] {
        config.rotation = method;
        let dir = out.as_ref().map(|d| d.join(format!("{method:?}").to_lowercase()));
        let s = run_pipeline(&config, 42, dir.as_deref())?.summary;
        println!(
            "{:<10}{:>14.4e}{:>14.2e}{:>12.1}",
            format!("{method:?}").to_lowercase(),
            s.quality.quantized_output_mse,
            s.invariance_max_rel_deviation,
            s.success_rates.mean
        );
    }
    Ok(())
}
