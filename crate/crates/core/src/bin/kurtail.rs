use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kurtail::pipeline::{
    build_rotations, capture_activations, configure_threads, outlier_figure_rows, read_activation_set, rotated_view,
    run_pipeline, sensitivity_table, write_figure_csv, write_sensitivity_csv, RotationFile, RotationMethod, RunConfig,
    Seeds,
};
use kurtail::quant::Condition;
use kurtail::rotor::{ActivationSet, BlockKind, RotationTrainConfig};
use kurtail::toyformer::{
    fold_rmsnorm, fuse_rotations, output_mse, quantize_weights, read_model, write_model,
    LinearInputs, ModelConfig, RotationSet, WeightFile, WeightMethod,
};
use kurtail::{KurtailError, Result};

#[derive(Parser)]
#[command(name = "kurtail", version, about = "Learned rotations for 4-bit W/A/KV quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic model as a KTWT file.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Capture block inputs and value outputs layer by layer into KTAC files.
    Capture {
        #[command(flatten)]
        run: RunArgs,
        /// KTWT model; defaults to the configured model source.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn R1 and per-layer R2 from captured activations.
    TrainRot {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        acts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold norm scales and fuse a rotation file into a model.
    Fuse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        rotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize the weights of a model (RTN or GPTQ).
    Quantize {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Logit MSE of a candidate model against a full-precision reference.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
    },
    /// Sensitivity curves for vanilla, Hadamard and learned rotations.
    Sensitivity {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        acts: PathBuf,
        #[arg(long)]
        rotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-channel magnitudes before and after rotation for one record.
    FigureData {
        #[arg(long)]
        acts: PathBuf,
        #[arg(long)]
        rotations: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, value_enum, default_value_t = Block::MhsaInput)]
        block: Block,
        #[arg(long, default_value_t = 64)]
        tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Capture, learn, fuse, quantize and evaluate in one run.
    Pipeline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Block {
    MhsaInput,
    FfnInput,
    ValueOutput,
}

impl From<Block> for BlockKind {
    fn from(b: Block) -> Self {
        match b {
            Block::MhsaInput => BlockKind::MhsaInput,
            Block::FfnInput => BlockKind::FfnInput,
            Block::ValueOutput => BlockKind::ValueOutput,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Rotation {
    None,
    Random,
    Hadamard,
    Kurtail,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Rtn,
    Gptq,
}

/// Config file plus the overrides shared by experiment verbs.
#[derive(Args)]
struct RunArgs {
    /// Master seed; every random choice derives from it.
    #[arg(long)]
    seed: u64,
    /// JSON run config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    rotation: Option<Rotation>,
    #[arg(long, value_enum)]
    weight_method: Option<Method>,
    /// Bit width for weights, activations and KV cache.
    #[arg(long)]
    bits: Option<u32>,
    /// Leave the online Hadamard rotations off.
    #[arg(long)]
    no_online: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(n) = self.samples {
            c.calibration.sample_count = n;
        }
        if let Some(n) = self.seq_len {
            c.calibration.sequence_length = n;
            c.evaluation.sequence_length = n;
        }
        if let Some(n) = self.iterations {
            c.training.iterations = n;
        }
        if let Some(lr) = self.lr {
            c.training.optimizer.lr = lr;
        }
        if let Some(r) = self.rotation {
            c.rotation = match r {
                Rotation::None => RotationMethod::None,
                Rotation::Random => RotationMethod::Random,
                Rotation::Hadamard => RotationMethod::Hadamard,
                Rotation::Kurtail => RotationMethod::Kurtail,
            };
        }
        if let Some(m) = self.weight_method {
            c.quant.weight.method = match m {
                Method::Rtn => WeightMethod::Rtn,
                Method::Gptq => WeightMethod::Gptq,
            };
        }
        if let Some(b) = self.bits {
            c.quant.activation.bits = b;
            c.quant.kv.bits = b;
            c.quant.weight.bits = b;
        }
        if self.no_online {
            c.online = false;
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn train_config(config: &RunConfig, seeds: &Seeds) -> RotationTrainConfig {
    RotationTrainConfig {
        seed: seeds.training,
        ..config.training.clone()
    }
}

/// Model shape recorded in a capture; only the rotation dimensions matter.
fn capture_config(set: &ActivationSet) -> ModelConfig {
    let meta = set.meta();
    ModelConfig {
        d_model: meta.d_model,
        n_heads: meta.n_heads,
        n_layers: meta.n_layers,
        ..Default::default()
    }
}

fn load_rotations(path: &Path) -> Result<(RotationMethod, RotationSet)> {
    let file = RotationFile::read(path)?;
    Ok((file.method, file.to_set()?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { run, out } => {
            let config = run.resolve()?;
            let model = config.model.load(Seeds::derive(run.seed).model)?;
            write_model(&model, &out)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Capture { run, model, out } => {
            let config = run.resolve()?;
            let seeds = Seeds::derive(run.seed);
            let set = match model {
                Some(path) => {
                    let file = WeightFile::open(&path)?;
                    let seqs = config.calibration.generate(file.config().vocab_size, seeds.calibration)?;
                    capture_activations(file, &seqs, &path.display().to_string(), Some(&out))?
                }
                None => {
                    let model = config.model.load(seeds.model)?;
                    let seqs = config.calibration.generate(model.config.vocab_size, seeds.calibration)?;
                    capture_activations(&model, &seqs, "synthetic", Some(&out))?
                }
            };
            eprintln!("captured {} records into {}", set.records().len(), out.display());
        }
        Command::TrainRot { run, acts, out } => {
            let config = run.resolve()?;
            let seeds = Seeds::derive(run.seed);
            let set = read_activation_set(&acts)?;
            let (rot, logs) = build_rotations(
                config.rotation,
                &capture_config(&set),
                Some(&set),
                &train_config(&config, &seeds),
                config.online,
                seeds.rotation,
            )?;
            RotationFile::new(config.rotation, &rot).write(&out)?;
            if let Some(logs) = logs {
                let stem = out.with_extension("");
                logs.r1.write_csv(&stem.with_extension("r1.csv"))?;
                for (l, log) in logs.r2.iter().enumerate() {
                    log.write_csv(&stem.with_extension(format!("r2_layer{l:03}.csv")))?;
                }
                eprintln!("R1 loss {:.4} -> {:.4}", logs.r1.initial_loss, logs.r1.final_loss);
            }
            eprintln!("wrote {}", out.display());
        }
        Command::Fuse { model, rotations, out } => {
            let model = fold_rmsnorm(&read_model(&model)?)?;
            let (_, rot) = load_rotations(&rotations)?;
            write_model(&fuse_rotations(&model, &rot)?, &out)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Quantize { run, model, out } => {
            let config = run.resolve()?;
            let seeds = Seeds::derive(run.seed);
            let model = read_model(&model)?;
            let hessians = match config.quant.weight.method {
                WeightMethod::Gptq => {
                    let seqs = config.calibration.generate(model.config.vocab_size, seeds.calibration)?;
                    Some(LinearInputs::collect(&model, &seqs, config.gptq_damping)?)
                }
                WeightMethod::Rtn => None,
            };
            write_model(&quantize_weights(&model, &config.quant.weight, hessians.as_deref())?, &out)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Eval { run, reference, candidate } => {
            let config = run.resolve()?;
            let seeds = Seeds::derive(run.seed);
            let reference = read_model(&reference)?;
            let candidate = read_model(&candidate)?;
            let seqs = config.evaluation.generate(reference.config.vocab_size, seeds.evaluation)?;
            let mse = output_mse(&reference, &candidate, Some(&config.quant), &seqs)?;
            print_json(&serde_json::json!({
                "full_precision_output_mse": output_mse(&reference, &candidate, None, &seqs)?,
                "quantized_output_mse": mse,
                "toy_perplexity": mse.exp(),
            }))?;
        }
        Command::Sensitivity { run, acts, rotations, out } => {
            let config = run.resolve()?;
            let seeds = Seeds::derive(run.seed);
            let set = read_activation_set(&acts)?;
            let (_, learned) = load_rotations(&rotations)?;
            let mc = capture_config(&set);
            let identity = RotationSet::identity(&mc);
            let hadamard = RotationSet::hadamard(&mc, seeds.rotation)?;
            let conditions = [
                (Condition::Vanilla, &identity),
                (Condition::Hadamard, &hadamard),
                (Condition::Kurtail, &learned),
            ];
            let reports = sensitivity_table(&set, &conditions, config.quant.activation.bits, &config.alphas)?;
            write_sensitivity_csv(&out, &reports)?;
            eprintln!("wrote {}", out.display());
        }
        Command::FigureData { acts, rotations, layer, block, tokens, out } => {
            let set = read_activation_set(&acts)?;
            let (_, rot) = load_rotations(&rotations)?;
            let identity = RotationSet::identity(&capture_config(&set));
            let kind = BlockKind::from(block);
            let pick = |view: &ActivationSet| {
                view.get(layer, kind)
                    .map(|r| r.tokens.clone())
                    .ok_or_else(|| KurtailError::InvalidArgument(format!("no layer {layer} {}", kind.as_str())))
            };
            let before = pick(&rotated_view(&set, &identity)?)?;
            let after = pick(&rotated_view(&set, &rot)?)?;
            write_figure_csv(&out, &outlier_figure_rows(&before, &after, tokens)?)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Pipeline { run, out } => {
            let config = run.resolve()?;
            let result = run_pipeline(&config, run.seed, Some(&out))?;
            let s = &result.summary;
            eprintln!(
                "invariance {:.2e}, quantized output MSE {:.4e}, success rate {:.2}%",
                s.invariance_max_rel_deviation, s.quality.quantized_output_mse, s.success_rates.mean
            );
            eprintln!("wrote {}", out.join("summary.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
