//! End-to-end runs: capture, learn, fuse, quantize, evaluate.
//!
//! A run is driven by one [`RunConfig`] and a master seed. Every random
//! choice draws from a sub-seed derived from the master seed, so two runs
//! with the same config and seed produce byte-identical artifacts.

pub mod analysis;
pub mod capture;
pub mod ktac;
pub mod rotations;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KurtailError, Result, StageExt};
use crate::gptq::DEFAULT_DAMPING;
use crate::quant::{Condition, SensitivityReport};
use crate::rotor::{BlockKind, RotationInit, RotationTrainConfig};
use crate::toyformer::{
    fold_rmsnorm, fuse_rotations, invariance_report, markov_corpus, output_mse, quantize_weights, random_tokens,
    read_model, success_rate, write_model, DecoderModel, LinearInputs, ModelConfig, OutlierPlan, QuantConfigSet,
    RotationSet, SuccessRates, SyntheticModel, WeightMethod,
};

pub use analysis::{
    kurtosis_table, mean_gamma, BLOCK_INPUTS, outlier_figure_rows, rotated_view, sensitivity_table, subsample, write_figure_csv,
    write_sensitivity_csv, FigureRow, KurtosisEntry,
};
pub use capture::{capture_activations, LayerSource};
pub use ktac::{read_activation_set, write_activation_set, KTAC_MAGIC, KTAC_VERSION};
pub use rotations::{build_rotations, learn_rotations, LossSummary, RotationFile, RotationMethod, TrainingLogs};

pub const THREADS_ENV: &str = "KURTAIL_THREADS";

/// Sizes the global worker pool from `KURTAIL_THREADS` when it is set.
/// Returns the worker count in effect.
pub fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| KurtailError::InvalidArgument(format!("{THREADS_ENV}={v} is not a positive integer")))?;
        // A pool that already exists (tests, embedding apps) is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

/// SplitMix64 step.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub model: u64,
    pub calibration: u64,
    pub evaluation: u64,
    pub training: u64,
    pub rotation: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        let sub = |k: u64| splitmix64(master ^ splitmix64(k));
        Self {
            master,
            model: sub(1),
            calibration: sub(2),
            evaluation: sub(3),
            training: sub(4),
            rotation: sub(5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    /// Seeded synthetic decoder; the seed comes from the run.
    Synthetic {
        #[serde(default)]
        config: ModelConfig,
        /// Planted outliers unless set to `null`.
        #[serde(default = "planted")]
        outliers: Option<OutlierPlan>,
        #[serde(default = "yes")]
        random_norm_scales: bool,
    },
    /// A KTWT weight file.
    File { path: PathBuf },
}

fn yes() -> bool {
    true
}

fn planted() -> Option<OutlierPlan> {
    Some(OutlierPlan::default())
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Synthetic {
            config: ModelConfig::default(),
            outliers: Some(OutlierPlan::default()),
            random_norm_scales: true,
        }
    }
}

impl ModelSource {
    pub fn load(&self, seed: u64) -> Result<DecoderModel> {
        match self {
            ModelSource::Synthetic {
                config,
                outliers,
                random_norm_scales,
            } => DecoderModel::synthetic(&SyntheticModel {
                config: config.clone(),
                seed,
                outliers: outliers.clone(),
                random_norm_scales: *random_norm_scales,
            }),
            ModelSource::File { path } => read_model(path),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    /// Seeded first-order Markov text.
    Markov,
    /// Independent uniform tokens.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub kind: CorpusKind,
    pub sample_count: usize,
    pub sequence_length: usize,
}

impl CorpusConfig {
    pub fn generate(&self, vocab: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        if self.sample_count == 0 || self.sequence_length == 0 {
            return Err(KurtailError::InvalidArgument("corpus sizes must be positive".into()));
        }
        Ok(match self.kind {
            CorpusKind::Markov => markov_corpus(self.sample_count, self.sequence_length, vocab, seed),
            CorpusKind::Uniform => (0..self.sample_count as u64)
                .map(|i| random_tokens(self.sequence_length, vocab, splitmix64(seed ^ i)))
                .collect(),
        })
    }
}

/// Everything a run needs besides the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    pub calibration: CorpusConfig,
    pub evaluation: CorpusConfig,
    pub rotation: RotationMethod,
    /// Online Hadamard R3, R4 and R5.
    pub online: bool,
    /// `seed` is replaced by the run's training sub-seed.
    pub training: RotationTrainConfig,
    pub quant: QuantConfigSet,
    pub gptq_damping: f64,
    /// Sequences from the evaluation corpus used for the invariance check.
    pub invariance_samples: usize,
    /// Tokens per record kept for kurtosis, sensitivity and success rates.
    pub analysis_tokens: usize,
    pub alphas: Vec<f64>,
    /// Tokens per side in the outlier figure data.
    pub figure_tokens: usize,
    pub write_activations: bool,
    pub write_models: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSource::default(),
            calibration: CorpusConfig {
                kind: CorpusKind::Markov,
                sample_count: 512,
                sequence_length: 128,
            },
            evaluation: CorpusConfig {
                kind: CorpusKind::Markov,
                sample_count: 64,
                sequence_length: 128,
            },
            rotation: RotationMethod::Kurtail,
            online: true,
            training: RotationTrainConfig {
                init: RotationInit::RandomizedHadamard,
                ..RotationTrainConfig::default()
            },
            quant: QuantConfigSet::uniform(4, WeightMethod::Gptq),
            gptq_damping: DEFAULT_DAMPING,
            invariance_samples: 8,
            analysis_tokens: 4096,
            alphas: vec![0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4],
            figure_tokens: 64,
            write_activations: false,
            write_models: true,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        if self.invariance_samples == 0 || self.analysis_tokens == 0 {
            return Err(KurtailError::InvalidArgument("sample counts must be positive".into()));
        }
        if !self.alphas.contains(&1.0) {
            return Err(KurtailError::InvalidArgument("alphas must include 1.0".into()));
        }
        if !(self.gptq_damping > 0.0) {
            return Err(KurtailError::InvalidArgument("gptq_damping must be positive".into()));
        }
        Ok(())
    }
}

/// Full-precision versus quantized outputs on the evaluation corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityReport {
    /// Mean squared logit deviation from the full-precision model.
    pub quantized_output_mse: f64,
    /// `exp` of the deviation above; 1 means lossless.
    pub toy_perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSummary {
    pub r1: LossSummary,
    pub r2: Vec<LossSummary>,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub format_version: u32,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub model: ModelConfig,
    /// Largest relative logit deviation of the rotated full-precision model.
    pub invariance_max_rel_deviation: f64,
    pub quality: QualityReport,
    pub kurtosis: Vec<KurtosisEntry>,
    /// Tokens whose max |value| shrank under the rotations, in percent.
    pub success_rates: SuccessRates,
    pub training: Option<TrainingSummary>,
    /// Mean Γ per condition and α over the MHSA and FFN inputs.
    pub mean_sensitivity: Vec<MeanSensitivity>,
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanSensitivity {
    pub condition: Condition,
    pub alpha: f64,
    pub gamma: f64,
}

pub const SUMMARY_FORMAT_VERSION: u32 = 1;

/// In-memory results of [`run_pipeline`] beyond the summary.
pub struct RunOutput {
    pub summary: RunSummary,
    pub rotations: RotationSet,
    pub sensitivity: Vec<SensitivityReport>,
    pub training_logs: Option<TrainingLogs>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Runs the whole method once. With `out_dir`, artifacts are written there.
pub fn run_pipeline(config: &RunConfig, seed: u64, out_dir: Option<&Path>) -> Result<RunOutput> {
    config.validate().stage("config")?;
    let seeds = Seeds::derive(seed);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(KurtailError::from).stage("output")?;
    }
    let mut artifacts = Vec::new();

    let model = config.model.load(seeds.model).stage("model")?;
    let folded = fold_rmsnorm(&model).stage("model")?;
    drop(model);
    let vocab = folded.config.vocab_size;
    let calibration = config.calibration.generate(vocab, seeds.calibration).stage("calibration")?;
    let evaluation = config.evaluation.generate(vocab, seeds.evaluation).stage("calibration")?;

    let acts_dir = out_dir.filter(|_| config.write_activations).map(|d| d.join("activations"));
    let acts = capture_activations(&folded, &calibration, "pipeline", acts_dir.as_deref()).stage("capture")?;
    if acts_dir.is_some() {
        artifacts.push("activations/manifest.json".to_string());
    }

    let train = RotationTrainConfig {
        seed: seeds.training,
        ..config.training.clone()
    };
    let (rotations, logs) = build_rotations(
        config.rotation,
        &folded.config,
        Some(&acts),
        &train,
        config.online,
        seeds.rotation,
    )
    .stage("train")?;
    let sample = subsample(&acts, config.analysis_tokens).stage("analysis")?;
    drop(acts);

    let fused = fuse_rotations(&folded, &rotations).stage("fuse")?;
    let probe = &evaluation[..config.invariance_samples.min(evaluation.len())];
    let invariance = invariance_report(&folded, &fused, probe).stage("fuse")?;

    let hessians = match config.quant.weight.method {
        WeightMethod::Gptq => {
            Some(LinearInputs::collect(&fused, &calibration, config.gptq_damping).stage("quantize")?)
        }
        WeightMethod::Rtn => None,
    };
    let quantized = quantize_weights(&fused, &config.quant.weight, hessians.as_deref()).stage("quantize")?;
    drop(hessians);

    let mse = output_mse(&folded, &quantized, Some(&config.quant), &evaluation).stage("evaluate")?;
    let quality = QualityReport {
        quantized_output_mse: mse,
        toy_perplexity: mse.exp(),
    };

    let identity = RotationSet::identity(&folded.config);
    let hadamard = RotationSet::hadamard(&folded.config, seeds.rotation).stage("analysis")?;
    let before = rotated_view(&sample, &identity).stage("analysis")?;
    let after = rotated_view(&sample, &rotations).stage("analysis")?;
    let kurtosis = kurtosis_table(&before, &after).stage("analysis")?;
    let success_rates = success_rate(&before, &after).stage("analysis")?;
    let conditions = [
        (Condition::Vanilla, &identity),
        (Condition::Hadamard, &hadamard),
        (Condition::Kurtail, &rotations),
    ];
    let sensitivity =
        sensitivity_table(&sample, &conditions, config.quant.activation.bits, &config.alphas).stage("analysis")?;
    let mean_sensitivity = Condition::ALL
        .iter()
        .flat_map(|c| config.alphas.iter().map(move |a| (*c, *a)))
        .filter_map(|(condition, alpha)| {
            mean_gamma(&sensitivity, condition, alpha, &BLOCK_INPUTS).map(|gamma| MeanSensitivity { condition, alpha, gamma })
        })
        .collect();

    if let Some(dir) = out_dir {
        let figure_block = BlockKind::MhsaInput;
        let (Some(b), Some(a)) = (before.get(0, figure_block), after.get(0, figure_block)) else {
            return Err(KurtailError::Empty("no layer-0 block input captured".into())).stage("analysis");
        };
        let rows = outlier_figure_rows(&b.tokens, &a.tokens, config.figure_tokens).stage("analysis")?;
        write_figure_csv(&dir.join("figure_outliers.csv"), &rows).stage("output")?;
        write_sensitivity_csv(&dir.join("sensitivity.csv"), &sensitivity).stage("output")?;
        RotationFile::new(config.rotation, &rotations)
            .write(&dir.join("rotations.json"))
            .stage("output")?;
        artifacts.extend(["figure_outliers.csv", "sensitivity.csv", "rotations.json"].map(String::from));
        if let Some(logs) = &logs {
            logs.r1.write_csv(&dir.join("train_r1.csv")).stage("output")?;
            artifacts.push("train_r1.csv".into());
            for (l, log) in logs.r2.iter().enumerate() {
                let name = format!("train_r2_layer{l:03}.csv");
                log.write_csv(&dir.join(&name)).stage("output")?;
                artifacts.push(name);
            }
        }
        if config.write_models {
            write_model(&fused, &dir.join("fused.ktwt")).stage("output")?;
            write_model(&quantized, &dir.join("quantized.ktwt")).stage("output")?;
            artifacts.extend(["fused.ktwt", "quantized.ktwt"].map(String::from));
        }
        artifacts.push("summary.json".into());
    }

    let summary = RunSummary {
        format_version: SUMMARY_FORMAT_VERSION,
        config: config.clone(),
        seeds,
        model: folded.config.clone(),
        invariance_max_rel_deviation: invariance,
        quality,
        kurtosis,
        success_rates,
        training: logs.as_ref().map(|l| TrainingSummary {
            r1: (&l.r1).into(),
            r2: l.r2.iter().map(LossSummary::from).collect(),
        }),
        mean_sensitivity,
        artifacts,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("summary.json"), &summary).stage("output")?;
    }
    Ok(RunOutput {
        summary,
        rotations,
        sensitivity,
        training_logs: logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference generator seeded with 0.
        let mut state = 0u64;
        let mut next = || {
            let out = splitmix64(state);
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            out
        };
        assert_eq!(next(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(next(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(next(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let s = Seeds::derive(7);
        let all = [s.model, s.calibration, s.evaluation, s.training, s.rotation];
        let mut sorted = all.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), all.len());
        assert_eq!(Seeds::derive(7), s);
        assert_ne!(Seeds::derive(8).model, s.model);
    }

    #[test]
    fn config_json_defaults_and_unknown_fields() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        let c: RunConfig = serde_json::from_str(r#"{"rotation": "hadamard", "online": false}"#).unwrap();
        assert_eq!(c.rotation, RotationMethod::Hadamard);
        assert!(!c.online);
        assert!(serde_json::from_str::<RunConfig>(r#"{"rotaton": "none"}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"model": {"kind": "synthetic", "config": {"d_model": 32}}}"#).unwrap();
        let ModelSource::Synthetic { config, outliers, random_norm_scales } = c.model else {
            panic!("expected a synthetic source");
        };
        assert_eq!((config.d_model, config.n_layers), (32, ModelConfig::default().n_layers));
        assert_eq!(outliers, Some(OutlierPlan::default()));
        assert!(random_norm_scales);
        let c: RunConfig = serde_json::from_str(r#"{"model": {"kind": "synthetic", "outliers": null}}"#).unwrap();
        assert!(matches!(c.model, ModelSource::Synthetic { outliers: None, .. }));
        let text = serde_json::to_string(&RunConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn invalid_config_fails_in_config_stage() {
        let c = RunConfig {
            alphas: vec![0.8],
            ..RunConfig::default()
        };
        match run_pipeline(&c, 0, None) {
            Err(KurtailError::Stage { stage, .. }) => assert_eq!(stage, "config"),
            other => panic!("unexpected {:?}", other.err()),
        }
    }

    #[test]
    fn thread_env_is_validated() {
        // Only the parse path is exercised; the global pool is left alone.
        std::env::set_var(THREADS_ENV, "zero");
        assert!(configure_threads().is_err());
        std::env::remove_var(THREADS_ENV);
        assert!(configure_threads().unwrap() >= 1);
    }
}
