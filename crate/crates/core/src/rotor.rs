//! Rotation learning from captured activations.
//!
//! The residual stream entering each block is replayed through a proxy:
//! a rotation followed (for R1) by a unit-scale RMSNorm, which reproduces what
//! the quantizer sees once norm scales are folded into the next linear layer.
//! The rotation is trained to bring the kurtosis of every (layer, block)
//! group towards that of a uniform distribution.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KurtailError, Result};
use crate::linalg::{matmul, matmul_tn, random_orthogonal, randomized_hadamard, Matrix, OrthogonalMatrix};
use crate::manifold::{CayleyConfig, CayleyOptimizer, OptimizerKind};
use crate::stats::{kurtosis, kurtosis_loss_with_gradient, UNIFORM_KURTOSIS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Residual stream entering the attention block (before its RMSNorm).
    MhsaInput,
    /// Residual stream entering the feed-forward block (before its RMSNorm).
    FfnInput,
    /// Output of the value projection, before any R2.
    ValueOutput,
}

impl BlockKind {
    pub const ALL: [BlockKind; 3] = [BlockKind::MhsaInput, BlockKind::FfnInput, BlockKind::ValueOutput];

    pub fn code(self) -> u32 {
        match self {
            BlockKind::MhsaInput => 0,
            BlockKind::FfnInput => 1,
            BlockKind::ValueOutput => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(BlockKind::MhsaInput),
            1 => Ok(BlockKind::FfnInput),
            2 => Ok(BlockKind::ValueOutput),
            c => Err(KurtailError::Format(format!("unknown block code {c}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::MhsaInput => "mhsa_input",
            BlockKind::FfnInput => "ffn_input",
            BlockKind::ValueOutput => "value_output",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub layer: usize,
    pub block: BlockKind,
    /// tokens × channels
    pub tokens: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureMeta {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub sample_count: usize,
    pub sequence_length: usize,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSet {
    records: Vec<ActivationRecord>,
    meta: CaptureMeta,
}

impl ActivationSet {
    pub fn new(mut records: Vec<ActivationRecord>, meta: CaptureMeta) -> Result<Self> {
        if meta.n_heads == 0 || !meta.d_model.is_multiple_of(meta.n_heads) {
            return Err(KurtailError::dims("d_model must be a multiple of n_heads"));
        }
        for kind in BlockKind::ALL {
            let mut cols = records.iter().filter(|r| r.block == kind).map(|r| r.tokens.cols());
            if let Some(first) = cols.next() {
                if cols.any(|c| c != first) {
                    return Err(KurtailError::dims(format!(
                        "{} records disagree on channel count",
                        kind.as_str()
                    )));
                }
            }
        }
        for r in &records {
            if r.tokens.rows() == 0 {
                return Err(KurtailError::Empty(format!(
                    "layer {} {} has no tokens",
                    r.layer,
                    r.block.as_str()
                )));
            }
            if !r.tokens.is_finite() {
                return Err(KurtailError::NonFinite("activation record".into()));
            }
        }
        records.sort_by_key(|r| (r.layer, r.block));
        Ok(Self { records, meta })
    }

    pub fn records(&self) -> &[ActivationRecord] {
        &self.records
    }

    pub fn meta(&self) -> &CaptureMeta {
        &self.meta
    }

    pub fn get(&self, layer: usize, block: BlockKind) -> Option<&ActivationRecord> {
        self.records.iter().find(|r| r.layer == layer && r.block == block)
    }

    pub fn of_kind(&self, block: BlockKind) -> impl Iterator<Item = &ActivationRecord> {
        self.records.iter().filter(move |r| r.block == block)
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.records.iter().map(|r| r.layer).collect();
        l.dedup();
        l
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Applies `f` to every record's token matrix.
    pub fn map_tokens(&self, mut f: impl FnMut(&ActivationRecord) -> Result<Matrix>) -> Result<Self> {
        let records = self
            .records
            .iter()
            .map(|r| {
                Ok(ActivationRecord {
                    layer: r.layer,
                    block: r.block,
                    tokens: f(r)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(records, self.meta.clone())
    }
}

/// Rotation followed by an optional unit-scale RMSNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyNet {
    pub rotation: OrthogonalMatrix,
    pub use_rmsnorm: bool,
    pub rmsnorm_epsilon: f64,
}

impl ProxyNet {
    pub fn r1(rotation: OrthogonalMatrix) -> Self {
        Self {
            rotation,
            use_rmsnorm: true,
            rmsnorm_epsilon: 1e-6,
        }
    }

    pub fn r2(rotation: OrthogonalMatrix) -> Self {
        Self {
            rotation,
            use_rmsnorm: false,
            rmsnorm_epsilon: 1e-6,
        }
    }
}

/// Row-wise `v / √(mean(v²) + ε)`.
pub fn rms_normalize(x: &Matrix, eps: f64) -> Matrix {
    let mut y = x.clone();
    let d = x.cols() as f64;
    for i in 0..y.rows() {
        let row = y.row_mut(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (ms + eps).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    y
}

fn check_proxy_input(x: &Matrix, net: &ProxyNet) -> Result<()> {
    if x.cols() != net.rotation.dim() {
        return Err(KurtailError::dims(format!(
            "proxy input has {} channels, rotation is {}",
            x.cols(),
            net.rotation.dim()
        )));
    }
    Ok(())
}

pub fn proxy_forward(x: &Matrix, net: &ProxyNet) -> Result<Matrix> {
    check_proxy_input(x, net)?;
    let z = matmul(x, net.rotation.matrix())?;
    Ok(if net.use_rmsnorm {
        rms_normalize(&z, net.rmsnorm_epsilon)
    } else {
        z
    })
}

/// Gradient of a scalar loss with respect to the rotation entries, given
/// the loss gradient `upstream` with respect to the proxy output.
pub fn proxy_backward(x: &Matrix, net: &ProxyNet, upstream: &Matrix) -> Result<Matrix> {
    check_proxy_input(x, net)?;
    if upstream.shape() != (x.rows(), net.rotation.dim()) {
        return Err(KurtailError::dims("upstream gradient shape"));
    }
    if !net.use_rmsnorm {
        return matmul_tn(x, upstream);
    }
    let z = matmul(x, net.rotation.matrix())?;
    let d = z.cols() as f64;
    let mut dz = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let zr = z.row(i);
        let norm_sq: f64 = zr.iter().map(|v| v * v).sum();
        if norm_sq.sqrt() < 1e-10 {
            return Err(KurtailError::InvalidArgument(format!(
                "degenerate proxy row {i} (norm < 1e-10)"
            )));
        }
        let r2 = norm_sq / d + net.rmsnorm_epsilon;
        let r = r2.sqrt();
        let g = upstream.row(i);
        let zg: f64 = zr.iter().zip(g).map(|(a, b)| a * b).sum();
        // y = z / r(z), ∂r/∂z = z / (d r)
        let c = zg / (d * r2 * r);
        for ((o, zv), gv) in dz.row_mut(i).iter_mut().zip(zr).zip(g) {
            *o = gv / r - c * zv;
        }
    }
    matmul_tn(x, &dz)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationInit {
    Identity,
    RandomOrthogonal,
    RandomizedHadamard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationTrainConfig {
    pub iterations: usize,
    pub groups_per_batch: usize,
    pub tokens_per_group: usize,
    pub kappa_target: f64,
    pub seed: u64,
    pub init: RotationInit,
    pub optimizer: CayleyConfig,
    pub rmsnorm_epsilon: f64,
}

impl Default for RotationTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            groups_per_batch: 8,
            tokens_per_group: 1024,
            kappa_target: UNIFORM_KURTOSIS,
            seed: 0,
            init: RotationInit::RandomOrthogonal,
            optimizer: CayleyConfig::default(),
            rmsnorm_epsilon: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Minibatch loss before each update.
    pub losses: Vec<f64>,
    /// Loss over the fixed evaluation subset at the initial rotation.
    pub initial_loss: f64,
    /// Same subset, final rotation.
    pub final_loss: f64,
}

impl TrainLog {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "loss"])?;
        for (i, l) in self.losses.iter().enumerate() {
            w.write_record([i.to_string(), format!("{l:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedRotation {
    pub rotation: OrthogonalMatrix,
    pub log: TrainLog,
}

fn initial_rotation(n: usize, init: RotationInit, seed: u64) -> Result<OrthogonalMatrix> {
    match init {
        RotationInit::Identity => Ok(OrthogonalMatrix::identity(n)),
        RotationInit::RandomOrthogonal => random_orthogonal(n, seed),
        RotationInit::RandomizedHadamard => randomized_hadamard(n, seed),
    }
}

/// Loss and rotation gradient over a set of groups.
fn batch_loss_grad(
    groups: &[Matrix],
    net: &ProxyNet,
    kappa_target: f64,
    with_grad: bool,
) -> Result<(f64, Option<Matrix>)> {
    let outputs = groups
        .par_iter()
        .map(|g| proxy_forward(g, net))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = outputs.iter().collect();
    let (loss, upstream) = kurtosis_loss_with_gradient(&refs, kappa_target, with_grad)?;
    if !loss.is_finite() {
        return Err(KurtailError::NonFinite("kurtosis loss".into()));
    }
    if !with_grad {
        return Ok((loss, None));
    }
    let parts = groups
        .par_iter()
        .zip(upstream.par_iter())
        .map(|(g, u)| proxy_backward(g, net, u))
        .collect::<Result<Vec<_>>>()?;
    let n = net.rotation.dim();
    let mut grad = Matrix::zeros(n, n);
    for p in &parts {
        grad = grad.add(p)?;
    }
    Ok((loss, Some(grad)))
}

fn sample_rows(m: &Matrix, count: usize, rng: &mut ChaCha8Rng) -> Matrix {
    if count >= m.rows() {
        return m.clone();
    }
    let mut idx = index::sample(rng, m.rows(), count).into_vec();
    idx.sort_unstable();
    m.select_rows(&idx)
}

/// Shared training loop over a pool of token groups.
fn train_rotation(pool: &[Matrix], use_rmsnorm: bool, config: &RotationTrainConfig) -> Result<TrainedRotation> {
    let n = pool
        .first()
        .ok_or_else(|| KurtailError::Empty("no activation groups to train on".into()))?
        .cols();
    if config.iterations == 0 || config.groups_per_batch == 0 || config.tokens_per_group == 0 {
        return Err(KurtailError::InvalidArgument("training sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init_seed = config.seed ^ 0x005E_ED0F_0127;
    let mut net = ProxyNet {
        rotation: initial_rotation(n, config.init, init_seed)?,
        use_rmsnorm,
        rmsnorm_epsilon: config.rmsnorm_epsilon,
    };

    let eval: Vec<Matrix> = pool
        .iter()
        .map(|g| sample_rows(g, config.tokens_per_group, &mut rng))
        .collect();
    let (initial_loss, _) = batch_loss_grad(&eval, &net, config.kappa_target, false)?;

    let mut opt_config = config.optimizer.clone();
    opt_config.total_steps.get_or_insert(config.iterations);
    let mut optimizer = CayleyOptimizer::new(OptimizerKind::Adam, n, opt_config);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut losses = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        order.shuffle(&mut rng);
        let batch: Vec<Matrix> = order
            .iter()
            .take(config.groups_per_batch)
            .map(|&g| sample_rows(&pool[g], config.tokens_per_group, &mut rng))
            .collect();
        let (loss, grad) = batch_loss_grad(&batch, &net, config.kappa_target, true)?;
        losses.push(loss);
        net.rotation = optimizer.step(&net.rotation, &grad.expect("gradient requested"))?;
    }
    let (final_loss, _) = batch_loss_grad(&eval, &net, config.kappa_target, false)?;
    Ok(TrainedRotation {
        rotation: net.rotation,
        log: TrainLog {
            losses,
            initial_loss,
            final_loss,
        },
    })
}

/// Learns the residual-stream rotation from the pooled MHSA and FFN inputs
/// of every layer. Each (layer, block) pair is one kurtosis group.
pub fn train_r1(acts: &ActivationSet, config: &RotationTrainConfig) -> Result<TrainedRotation> {
    let pool: Vec<Matrix> = acts
        .records()
        .iter()
        .filter(|r| matches!(r.block, BlockKind::MhsaInput | BlockKind::FfnInput))
        .map(|r| r.tokens.clone())
        .collect();
    if pool.is_empty() {
        return Err(KurtailError::Empty(
            "activation set has no mhsa_input/ffn_input records".into(),
        ));
    }
    train_rotation(&pool, true, config)
}

/// Learns one layer's value-space rotation (no RMSNorm). The rotation is
/// learned per head dimension and shared by all heads of the layer; the
/// returned matrix is its `d_model` block-diagonal expansion.
pub fn train_r2(acts: &ActivationSet, layer: usize, config: &RotationTrainConfig) -> Result<TrainedRotation> {
    let rec = acts.get(layer, BlockKind::ValueOutput).ok_or_else(|| {
        KurtailError::Empty(format!("no value_output record for layer {layer}"))
    })?;
    let heads = acts.meta().n_heads;
    let head_dim = rec.tokens.cols() / heads;
    let per_head = rec.tokens.clone().reshape(rec.tokens.rows() * heads, head_dim)?;
    // One group per iteration, drawn from this layer's pool.
    let cfg = RotationTrainConfig {
        tokens_per_group: config.tokens_per_group * config.groups_per_batch,
        groups_per_batch: 1,
        ..config.clone()
    };
    let trained = train_rotation(std::slice::from_ref(&per_head), false, &cfg)?;
    Ok(TrainedRotation {
        rotation: trained.rotation.block_diagonal(heads),
        log: trained.log,
    })
}

/// Per-group kurtosis of `proxy(x)` for every record of the given kinds.
pub fn group_kurtosis(
    acts: &ActivationSet,
    kinds: &[BlockKind],
    net: &ProxyNet,
) -> Result<Vec<f64>> {
    acts.records()
        .iter()
        .filter(|r| kinds.contains(&r.block))
        .map(|r| Ok(kurtosis(proxy_forward(&r.tokens, net)?.data())?.kappa))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::gaussian(rows, cols, &mut rng)
    }

    fn scalar_loss(x: &Matrix, net: &ProxyNet) -> f64 {
        let y = proxy_forward(x, net).unwrap();
        crate::stats::kurtosis_loss(&[&y], 1.8).unwrap()
    }

    fn fd_check(dim: usize, rows: usize, seed: u64, rmsnorm: bool) -> f64 {
        let x = rand_matrix(rows, dim, seed);
        let rot = random_orthogonal(dim, seed + 1).unwrap();
        let net = ProxyNet {
            rotation: rot,
            use_rmsnorm: rmsnorm,
            rmsnorm_epsilon: 1e-6,
        };
        let y = proxy_forward(&x, &net).unwrap();
        let (_, up) = kurtosis_loss_with_gradient(&[&y], 1.8, true).unwrap();
        let analytic = proxy_backward(&x, &net, &up[0]).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let scale = analytic.max_abs();
        for i in 0..dim {
            for j in 0..dim {
                let bump = |delta: f64| {
                    let mut m = net.rotation.matrix().clone();
                    m.set(i, j, m.get(i, j) + delta);
                    // Unconstrained perturbation: the gradient is ambient.
                    let p = ProxyNet {
                        rotation: OrthogonalMatrix::from_exact(m),
                        ..net.clone()
                    };
                    scalar_loss(&x, &p)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                worst = worst.max((fd - analytic.get(i, j)).abs() / scale);
            }
        }
        worst
    }

    #[test]
    fn identity_proxy_without_norm_is_passthrough() {
        let x = rand_matrix(5, 4, 1);
        let net = ProxyNet::r2(OrthogonalMatrix::identity(4));
        assert_eq!(proxy_forward(&x, &net).unwrap(), x);
    }

    #[test]
    fn rmsnorm_rows_have_unit_mean_square() {
        let x = rand_matrix(20, 16, 2).scale(30.0);
        let y = proxy_forward(&x, &ProxyNet::r1(random_orthogonal(16, 3).unwrap())).unwrap();
        for r in y.row_iter() {
            let ms = r.iter().map(|v| v * v).sum::<f64>() / 16.0;
            assert!((ms - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_preserves_row_norms() {
        let x = rand_matrix(10, 8, 4);
        let y = proxy_forward(&x, &ProxyNet::r2(random_orthogonal(8, 5).unwrap())).unwrap();
        for (a, b) in x.row_iter().zip(y.row_iter()) {
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((na - nb).abs() <= 1e-8 * na);
        }
    }

    #[test]
    fn backward_zero_upstream_and_linear_case() {
        let x = rand_matrix(12, 8, 6);
        let net = ProxyNet::r1(random_orthogonal(8, 7).unwrap());
        let g = proxy_backward(&x, &net, &Matrix::zeros(12, 8)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        let up = rand_matrix(12, 8, 8);
        let lin = ProxyNet::r2(net.rotation.clone());
        let g = proxy_backward(&x, &lin, &up).unwrap();
        assert!(g.max_abs_diff(&matmul(&x.transpose(), &up).unwrap()) < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (k, dim) in [4usize, 8, 16].into_iter().enumerate() {
            for rmsnorm in [true, false] {
                let err = fd_check(dim, 48, 100 + k as u64, rmsnorm);
                assert!(err <= 1e-4, "dim {dim} rmsnorm {rmsnorm}: {err}");
            }
        }
    }

    #[test]
    fn degenerate_rows_are_rejected() {
        let mut x = rand_matrix(4, 4, 9);
        x.row_mut(2).iter_mut().for_each(|v| *v = 0.0);
        let net = ProxyNet::r1(OrthogonalMatrix::identity(4));
        assert!(proxy_backward(&x, &net, &Matrix::zeros(4, 4)).is_err());
        assert!(proxy_forward(&rand_matrix(3, 5, 1), &net).is_err());
    }

    fn meta(d: usize, heads: usize, layers: usize) -> CaptureMeta {
        CaptureMeta {
            d_model: d,
            n_heads: heads,
            n_layers: layers,
            sample_count: 1,
            sequence_length: 1,
            source: "test".into(),
        }
    }

    fn uniform_set(d: usize, seed: u64) -> ActivationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recs = Vec::new();
        for layer in 0..2 {
            for block in [BlockKind::MhsaInput, BlockKind::FfnInput] {
                let tokens = Matrix::from_fn(512, d, |_, _| rng.random_range(-1.0..1.0));
                recs.push(ActivationRecord { layer, block, tokens });
            }
        }
        ActivationSet::new(recs, meta(d, 2, 2)).unwrap()
    }

    #[test]
    fn activation_set_invariants() {
        let good = uniform_set(8, 1);
        assert_eq!(good.layers(), vec![0, 1]);
        let bad = vec![
            ActivationRecord {
                layer: 0,
                block: BlockKind::MhsaInput,
                tokens: Matrix::zeros(3, 4),
            },
            ActivationRecord {
                layer: 1,
                block: BlockKind::MhsaInput,
                tokens: Matrix::zeros(3, 5),
            },
        ];
        assert!(ActivationSet::new(bad, meta(8, 2, 2)).is_err());
        let empty = vec![ActivationRecord {
            layer: 0,
            block: BlockKind::FfnInput,
            tokens: Matrix::zeros(0, 4),
        }];
        assert!(ActivationSet::new(empty, meta(8, 2, 2)).is_err());
    }

    #[test]
    fn uniform_input_stays_near_target() {
        let acts = uniform_set(16, 2);
        let cfg = RotationTrainConfig {
            iterations: 30,
            tokens_per_group: 256,
            init: RotationInit::Identity,
            ..RotationTrainConfig::default()
        };
        let out = train_r1(&acts, &cfg).unwrap();
        assert!(out.log.losses.iter().all(|l| l.is_finite()));
        assert!(out.log.final_loss <= 0.1);
        assert!(out.rotation.defect() <= 1e-6);
    }

    #[test]
    fn training_is_reproducible() {
        let acts = uniform_set(8, 3);
        let cfg = RotationTrainConfig {
            iterations: 10,
            tokens_per_group: 128,
            seed: 5,
            ..RotationTrainConfig::default()
        };
        let a = train_r1(&acts, &cfg).unwrap();
        let b = train_r1(&acts, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let acts = ActivationSet::new(vec![], meta(8, 2, 0)).unwrap();
        assert!(train_r1(&acts, &RotationTrainConfig::default()).is_err());
        assert!(train_r2(&acts, 0, &RotationTrainConfig::default()).is_err());
    }

    #[test]
    fn r2_on_spherical_gaussian_is_stable() {
        let (d, heads) = (16, 2);
        let tokens = rand_matrix(2048, d, 11);
        let acts = ActivationSet::new(
            vec![ActivationRecord {
                layer: 0,
                block: BlockKind::ValueOutput,
                tokens,
            }],
            meta(d, heads, 1),
        )
        .unwrap();
        let cfg = RotationTrainConfig {
            iterations: 40,
            tokens_per_group: 512,
            ..RotationTrainConfig::default()
        };
        let out = train_r2(&acts, 0, &cfg).unwrap();
        assert_eq!(out.rotation.dim(), d);
        assert!(out.rotation.defect() <= 1e-6);
        // off-block entries stay zero
        assert_eq!(out.rotation.matrix().get(0, 8), 0.0);
        assert!((out.log.final_loss - 1.2).abs() < 0.15);
        assert!(out.log.losses.iter().all(|l| (l - 1.2).abs() < 0.3));
    }

    #[test]
    fn planted_outliers_lose_kurtosis() {
        let d = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut recs = Vec::new();
        for layer in 0..2 {
            for block in [BlockKind::MhsaInput, BlockKind::FfnInput] {
                let mut t = Matrix::from_fn(512, d, |_, _| rng.sample::<f64, _>(StandardNormal));
                for i in 0..512 {
                    for c in [3, 11] {
                        let v = t.get(i, c) * 50.0;
                        t.set(i, c, v);
                    }
                }
                recs.push(ActivationRecord { layer, block, tokens: t });
            }
        }
        let acts = ActivationSet::new(recs, meta(d, 2, 2)).unwrap();
        let cfg = RotationTrainConfig {
            iterations: 50,
            tokens_per_group: 256,
            ..RotationTrainConfig::default()
        };
        let out = train_r1(&acts, &cfg).unwrap();
        let kinds = [BlockKind::MhsaInput, BlockKind::FfnInput];
        let before = group_kurtosis(&acts, &kinds, &ProxyNet::r1(OrthogonalMatrix::identity(d))).unwrap();
        let after = group_kurtosis(&acts, &kinds, &ProxyNet::r1(out.rotation.clone())).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&after) < mean(&before));
        assert!(out.log.final_loss <= out.log.initial_loss);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::linalg::random_orthogonal;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rmsnorm_commutes_with_rotation(n in 2usize..24, rows in 1usize..8, seed in any::<u64>()) {
            let x = Matrix::gaussian(rows, n, &mut ChaCha8Rng::seed_from_u64(seed)).scale(3.0);
            let r = random_orthogonal(n, seed ^ 5).unwrap();
            let via_proxy = proxy_forward(&x, &ProxyNet::r1(r.clone())).unwrap();
            let by_hand = r.apply_rows(&rms_normalize(&x, 1e-6)).unwrap();
            prop_assert!(via_proxy.max_abs_diff(&by_hand) < 1e-12);
        }
    }
}
