//! A small decoder-only transformer (RMSNorm, RoPE attention, SwiGLU) that
//! accepts fused and online rotations and simulated quantization.
//!
//! Layout per layer, in row-vector form:
//!
//! ```text
//! h ─┬─ RMSN ─◇─ Wq ─ RoPE ─ R3 ─────────┐
//!    │        ├─ Wk ─ RoPE ─ R3 ─◇─ K ───┤ softmax(QKᵀ/√d)·V ─ R4 ─◇─ Wo ─┐
//!    │        └─ Wv ─────────────◇─ V ───┘                                 │
//!    └──────────────────────────────────────────────────────────────(+)───┘
//! h ─┬─ RMSN ─◇─ Wup, Wgate ─ SiLU(gate)·up ─ R5 ─◇─ Wdown ─(+)
//! ```
//!
//! `◇` marks fake-quantization points when a [`QuantConfigSet`] is given.

pub(crate) mod forward;
mod fusion;
mod io;
mod metrics;
mod weights;

pub use forward::{
    attention_reference, forward, forward_hidden, rope_apply, ForwardOutput, LayerCapture,
};
pub use fusion::{fold_rmsnorm, fuse_rotations, RotationSet};
pub use io::{read_model, write_model, WeightFile, KTWT_MAGIC, KTWT_VERSION};
pub use metrics::{invariance_report, output_mse, success_rate, SuccessRates};
pub use weights::{quantize_weights, LinearInputs, LinearKind, WeightMethod, WeightQuantConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{KurtailError, Result};
use crate::linalg::{Matrix, RandomizedHadamard};
use crate::quant::QuantSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub rms_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            n_layers: 4,
            vocab_size: 256,
            rope_base: 10_000.0,
            rms_epsilon: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(KurtailError::dims(format!(
                "d_model {} is not a multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("head_dim", self.head_dim()),
            ("d_ff", self.d_ff),
        ] {
            if !v.is_power_of_two() {
                return Err(KurtailError::InvalidArgument(format!(
                    "{name} = {v} must be a power of two"
                )));
            }
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(KurtailError::InvalidArgument("head_dim must be even for RoPE".into()));
        }
        if self.n_layers == 0 || self.vocab_size == 0 {
            return Err(KurtailError::InvalidArgument("need at least one layer and one token".into()));
        }
        if !(self.rope_base > 0.0) || !(self.rms_epsilon >= 0.0) {
            return Err(KurtailError::InvalidArgument("rope_base and rms_epsilon".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub rms1: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub rms2: Vec<f64>,
    pub w_up: Matrix,
    pub w_gate: Matrix,
    pub w_down: Matrix,
}

impl LayerWeights {
    pub(crate) fn check(&self, c: &ModelConfig) -> Result<()> {
        let d = c.d_model;
        let shapes = [
            ("wq", &self.wq, (d, d)),
            ("wk", &self.wk, (d, d)),
            ("wv", &self.wv, (d, d)),
            ("wo", &self.wo, (d, d)),
            ("w_up", &self.w_up, (d, c.d_ff)),
            ("w_gate", &self.w_gate, (d, c.d_ff)),
            ("w_down", &self.w_down, (c.d_ff, d)),
        ];
        for (name, m, want) in shapes {
            if m.shape() != want {
                return Err(KurtailError::dims(format!(
                    "{name} is {:?}, expected {want:?}",
                    m.shape()
                )));
            }
        }
        if self.rms1.len() != d || self.rms2.len() != d {
            return Err(KurtailError::dims("rms scale length"));
        }
        Ok(())
    }
}

/// Online Hadamard rotation: off, or `D·H` with signs drawn from `seed`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlineMode {
    #[default]
    Off,
    Hadamard { seed: u64 },
}

impl OnlineMode {
    pub fn is_on(&self) -> bool {
        matches!(self, OnlineMode::Hadamard { .. })
    }

    pub fn build(&self, n: usize) -> Result<Option<RandomizedHadamard>> {
        match *self {
            OnlineMode::Off => Ok(None),
            OnlineMode::Hadamard { seed } => Ok(Some(RandomizedHadamard::new(n, seed)?)),
        }
    }
}

/// Online rotations currently active in a model. R4 and R5 are only valid
/// once their inverses are folded into `Wo` / `Wdown`, which `fuse_rotations`
/// does in the same step that switches them on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnlineRotations {
    pub r3: OnlineMode,
    pub r4: OnlineMode,
    pub r5: OnlineMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel {
    pub config: ModelConfig,
    /// vocab × d_model
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// d_model × vocab
    pub unembedding: Matrix,
    pub online: OnlineRotations,
}

impl DecoderModel {
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.embedding.shape() != (c.vocab_size, c.d_model) {
            return Err(KurtailError::dims("embedding shape"));
        }
        if self.unembedding.shape() != (c.d_model, c.vocab_size) {
            return Err(KurtailError::dims("unembedding shape"));
        }
        if self.final_norm.len() != c.d_model {
            return Err(KurtailError::dims("final norm length"));
        }
        if self.layers.len() != c.n_layers {
            return Err(KurtailError::dims(format!(
                "{} layers stored, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        self.layers.iter().try_for_each(|l| l.check(c))
    }

    pub fn is_folded(&self) -> bool {
        let ones = |v: &[f64]| v.iter().all(|g| *g == 1.0);
        ones(&self.final_norm) && self.layers.iter().all(|l| ones(&l.rms1) && ones(&l.rms2))
    }

    /// Switches R3 on or off. Needs no weight change: R3 cancels in `QKᵀ`.
    pub fn with_r3(mut self, mode: OnlineMode) -> Self {
        self.online.r3 = mode;
        self
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Matrix> {
        if let Some(t) = tokens.iter().find(|t| **t >= self.config.vocab_size) {
            return Err(KurtailError::InvalidArgument(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(self.embedding.select_rows(tokens))
    }

    /// Seeded synthetic model. Weights are drawn as `N(0, 1/fan_in)` and
    /// rounded to f32 so a model survives a KTWT round trip exactly.
    pub fn synthetic(spec: &SyntheticModel) -> Result<Self> {
        let c = spec.config.clone();
        c.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = c.d_model;
        let init = |rng: &mut ChaCha8Rng, r: usize, cols: usize| {
            Matrix::gaussian(r, cols, rng).scale(1.0 / (r as f64).sqrt())
        };
        let gamma = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..d)
                .map(|_| {
                    if spec.random_norm_scales {
                        rng.random_range(0.5..1.5f64) as f32 as f64
                    } else {
                        1.0
                    }
                })
                .collect()
        };
        let embedding = Matrix::gaussian(c.vocab_size, d, &mut rng);
        let mut layers = Vec::with_capacity(c.n_layers);
        for _ in 0..c.n_layers {
            let rms1 = gamma(&mut rng);
            let wq = init(&mut rng, d, d);
            let wk = init(&mut rng, d, d);
            let wv = init(&mut rng, d, d);
            let wo = init(&mut rng, d, d);
            let rms2 = gamma(&mut rng);
            let w_up = init(&mut rng, d, c.d_ff);
            let w_gate = init(&mut rng, d, c.d_ff);
            let w_down = init(&mut rng, c.d_ff, d);
            layers.push(LayerWeights {
                rms1,
                wq,
                wk,
                wv,
                wo,
                rms2,
                w_up,
                w_gate,
                w_down,
            });
        }
        let final_norm = gamma(&mut rng);
        let unembedding = init(&mut rng, d, c.vocab_size);
        let mut model = Self {
            config: c,
            embedding,
            layers,
            final_norm,
            unembedding,
            online: OnlineRotations::default(),
        };
        if let Some(o) = &spec.outliers {
            o.plant(&mut model, &mut rng)?;
        }
        model.round_to_f32();
        Ok(model)
    }

    fn round_to_f32(&mut self) {
        self.embedding = self.embedding.round_to_f32();
        self.unembedding = self.unembedding.round_to_f32();
        for l in &mut self.layers {
            for m in [
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.w_up,
                &mut l.w_gate,
                &mut l.w_down,
            ] {
                *m = m.round_to_f32();
            }
        }
    }
}

/// Scales a few weight columns so that some residual, value and FFN-hidden
/// channels carry much larger magnitudes than the rest. Residual outliers
/// enter through the embedding and ride the residual connection through
/// every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierPlan {
    pub residual_channels: usize,
    pub value_channels: usize,
    pub hidden_channels: usize,
    pub scale: f64,
    /// Give each residual outlier channel a fixed sign across the vocabulary,
    /// so every token carries the outliers along one shared direction.
    #[serde(default)]
    pub systematic: bool,
    /// Also scale the matching output columns of every `Wo` and `Wdown`, so
    /// each layer re-injects the outliers.
    #[serde(default)]
    pub amplify_layer_outputs: bool,
}

impl Default for OutlierPlan {
    fn default() -> Self {
        Self {
            residual_channels: 8,
            value_channels: 2,
            hidden_channels: 2,
            scale: 20.0,
            systematic: false,
            amplify_layer_outputs: false,
        }
    }
}

impl OutlierPlan {
    fn plant(&self, model: &mut DecoderModel, rng: &mut ChaCha8Rng) -> Result<()> {
        let c = &model.config;
        if self.residual_channels > c.d_model
            || self.value_channels > c.d_model
            || self.hidden_channels > c.d_ff
        {
            return Err(KurtailError::InvalidArgument("more outlier channels than channels".into()));
        }
        let residual = rand::seq::index::sample(rng, c.d_model, self.residual_channels).into_vec();
        let scale_cols = |m: &mut Matrix, cols: &[usize], s: f64| {
            for i in 0..m.rows() {
                for &j in cols {
                    m.set(i, j, m.get(i, j) * s);
                }
            }
        };
        scale_cols(&mut model.embedding, &residual, self.scale);
        if self.systematic {
            for &c in &residual {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                for t in 0..model.embedding.rows() {
                    let v = model.embedding.get(t, c).abs() * sign;
                    model.embedding.set(t, c, v);
                }
            }
        }
        for l in &mut model.layers {
            if self.amplify_layer_outputs {
                scale_cols(&mut l.wo, &residual, self.scale);
                scale_cols(&mut l.w_down, &residual, self.scale);
            }
            let v = rand::seq::index::sample(rng, c.d_model, self.value_channels).into_vec();
            scale_cols(&mut l.wv, &v, self.scale);
            let h = rand::seq::index::sample(rng, c.d_ff, self.hidden_channels).into_vec();
            scale_cols(&mut l.w_up, &h, self.scale);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModel {
    pub config: ModelConfig,
    pub seed: u64,
    #[serde(default)]
    pub outliers: Option<OutlierPlan>,
    #[serde(default)]
    pub random_norm_scales: bool,
}

/// Activation and KV fake quantization used inside [`forward`]. Weights are
/// quantized ahead of time with [`quantize_weights`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfigSet {
    pub activation: QuantSpec,
    pub kv: QuantSpec,
    pub weight: WeightQuantConfig,
}

impl QuantConfigSet {
    pub fn w4a4kv4() -> Self {
        Self::uniform(4, WeightMethod::Rtn)
    }

    pub fn uniform(bits: u32, method: WeightMethod) -> Self {
        Self {
            activation: QuantSpec::activation(bits),
            kv: QuantSpec::kv_cache(bits),
            weight: WeightQuantConfig { method, bits },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.activation.validate()?;
        self.kv.validate()?;
        QuantSpec::weight(self.weight.bits).validate()
    }
}

/// Uniform random tokens, seeded.
pub fn random_tokens(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Sequences from a seeded first-order Markov source where each token has a
/// small set of likely successors, a stand-in for natural text statistics.
pub fn markov_corpus(count: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
    const FANOUT: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let successors: Vec<Vec<usize>> = (0..vocab)
        .map(|_| (0..FANOUT).map(|_| rng.random_range(0..vocab)).collect())
        .collect();
    (0..count)
        .map(|_| {
            let mut t = rng.random_range(0..vocab);
            (0..len)
                .map(|_| {
                    let cur = t;
                    t = if rng.random::<f64>() < 0.9 {
                        let z: f64 = rng.sample::<f64, _>(StandardNormal).abs();
                        successors[cur][(z as usize).min(FANOUT - 1)]
                    } else {
                        rng.random_range(0..vocab)
                    };
                    cur
                })
                .collect()
        })
        .collect()
}
