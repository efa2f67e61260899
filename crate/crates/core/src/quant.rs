//! Uniform k-bit quantizers, quantization MSE, optimal step search and the
//! step-size sensitivity measure Γ.
//!
//! Symmetric codes live in `[−(2^(k−1)−1), 2^(k−1)−1]` with `b = 0`;
//! asymmetric codes in `[0, 2^k − 1]` with `b = x_min`. Rounding is
//! half-away-from-zero (`f64::round`).

use serde::{Deserialize, Serialize};

use crate::error::{KurtailError, Result};
use crate::linalg::Matrix;
use crate::rotor::BlockKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One group per row.
    PerToken,
    /// One group per column.
    PerChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub scheme: Scheme,
    pub granularity: Granularity,
    pub clip_quantile: f64,
}

impl QuantSpec {
    pub fn new(bits: u32, scheme: Scheme, granularity: Granularity, clip_quantile: f64) -> Result<Self> {
        let spec = Self {
            bits,
            scheme,
            granularity,
            clip_quantile,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Per-token dynamic symmetric activations, clipped at the 0.98 quantile.
    pub fn activation(bits: u32) -> Self {
        Self {
            bits,
            scheme: Scheme::Symmetric,
            granularity: Granularity::PerToken,
            clip_quantile: 0.98,
        }
    }

    /// Per-token asymmetric KV cache.
    pub fn kv_cache(bits: u32) -> Self {
        Self {
            bits,
            scheme: Scheme::Asymmetric,
            granularity: Granularity::PerToken,
            clip_quantile: 1.0,
        }
    }

    /// Per-column (output channel) symmetric weights.
    pub fn weight(bits: u32) -> Self {
        Self {
            bits,
            scheme: Scheme::Symmetric,
            granularity: Granularity::PerChannel,
            clip_quantile: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits < 2 || self.bits > 24 {
            return Err(KurtailError::InvalidBits(self.bits));
        }
        if !(self.clip_quantile > 0.0 && self.clip_quantile <= 1.0) {
            return Err(KurtailError::InvalidArgument(format!(
                "clip quantile {} outside (0, 1]",
                self.clip_quantile
            )));
        }
        Ok(())
    }

    pub fn code_range(&self) -> (i32, i32) {
        code_range(self.scheme, self.bits)
    }
}

fn code_range(scheme: Scheme, bits: u32) -> (i32, i32) {
    match scheme {
        Scheme::Symmetric => {
            let q = (1i32 << (bits - 1)) - 1;
            (-q, q)
        }
        Scheme::Asymmetric => (0, (1i32 << bits) - 1),
    }
}

/// Quantized codes plus per-group scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i32>,
    pub scales: Vec<f64>,
    pub shifts: Vec<f64>,
    pub spec: QuantSpec,
}

impl QuantizedTensor {
    #[inline]
    pub fn group_of(&self, i: usize, j: usize) -> usize {
        group_index(self.spec.granularity, i, j)
    }

    pub fn code(&self, i: usize, j: usize) -> i32 {
        self.codes[i * self.cols + j]
    }
}

#[inline]
fn group_index(g: Granularity, i: usize, j: usize) -> usize {
    match g {
        Granularity::PerTensor => 0,
        Granularity::PerToken => i,
        Granularity::PerChannel => j,
    }
}

/// Linear-interpolated empirical quantile of `sorted` (ascending).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn sort_f64(v: &mut [f64]) {
    v.sort_by(|a, b| a.total_cmp(b));
}

/// Scale and shift for one group.
fn group_params(values: &[f64], spec: &QuantSpec) -> (f64, f64) {
    let (lo_code, hi_code) = spec.code_range();
    match spec.scheme {
        Scheme::Symmetric => {
            let m = if spec.clip_quantile < 1.0 {
                let mut a: Vec<f64> = values.iter().map(|v| v.abs()).collect();
                sort_f64(&mut a);
                quantile_sorted(&a, spec.clip_quantile)
            } else {
                values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
            };
            let s = m / hi_code as f64;
            (if s > 0.0 { s } else { 1.0 }, 0.0)
        }
        Scheme::Asymmetric => {
            let (lo, hi) = if spec.clip_quantile < 1.0 {
                let mut a = values.to_vec();
                sort_f64(&mut a);
                (
                    quantile_sorted(&a, 1.0 - spec.clip_quantile),
                    quantile_sorted(&a, spec.clip_quantile),
                )
            } else {
                values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
                    (l.min(*v), h.max(*v))
                })
            };
            let s = (hi - lo) / (hi_code - lo_code) as f64;
            (if s > 0.0 { s } else { 1.0 }, lo)
        }
    }
}

#[inline]
fn encode(v: f64, s: f64, b: f64, range: (i32, i32)) -> i32 {
    let c = ((v - b) / s).round();
    c.clamp(range.0 as f64, range.1 as f64) as i32
}

fn check_input(x: &Matrix, spec: &QuantSpec) -> Result<()> {
    spec.validate()?;
    if !x.is_finite() {
        return Err(KurtailError::NonFinite("quantizer input".into()));
    }
    Ok(())
}

fn group_count(x: &Matrix, g: Granularity) -> usize {
    match g {
        Granularity::PerTensor => 1,
        Granularity::PerToken => x.rows(),
        Granularity::PerChannel => x.cols(),
    }
}

fn group_values(x: &Matrix, g: Granularity, k: usize) -> Vec<f64> {
    match g {
        Granularity::PerTensor => x.data().to_vec(),
        Granularity::PerToken => x.row(k).to_vec(),
        Granularity::PerChannel => x.column(k),
    }
}

pub fn quantize(x: &Matrix, spec: &QuantSpec) -> Result<QuantizedTensor> {
    check_input(x, spec)?;
    let groups = group_count(x, spec.granularity);
    let mut scales = Vec::with_capacity(groups);
    let mut shifts = Vec::with_capacity(groups);
    for k in 0..groups {
        let (s, b) = group_params(&group_values(x, spec.granularity, k), spec);
        scales.push(s);
        shifts.push(b);
    }
    let range = spec.code_range();
    let mut codes = Vec::with_capacity(x.rows() * x.cols());
    for i in 0..x.rows() {
        for (j, v) in x.row(i).iter().enumerate() {
            let g = group_index(spec.granularity, i, j);
            codes.push(encode(*v, scales[g], shifts[g], range));
        }
    }
    Ok(QuantizedTensor {
        rows: x.rows(),
        cols: x.cols(),
        codes,
        scales,
        shifts,
        spec: *spec,
    })
}

/// `codes · s + b` per group.
pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    Matrix::from_fn(q.rows, q.cols, |i, j| {
        let g = q.group_of(i, j);
        q.code(i, j) as f64 * q.scales[g] + q.shifts[g]
    })
}

/// `dequantize(quantize(x))`.
pub fn fake_quantize(x: &Matrix, spec: &QuantSpec) -> Result<Matrix> {
    Ok(dequantize(&quantize(x, spec)?))
}

/// Mean of `(x − Q(x))²`. With `step_override` every group uses that step
/// (symmetric: `b = 0`; asymmetric: `b` stays at the group minimum).
pub fn quant_mse(x: &Matrix, spec: &QuantSpec, step_override: Option<f64>) -> Result<f64> {
    check_input(x, spec)?;
    if x.data().is_empty() {
        return Ok(0.0);
    }
    let deq = match step_override {
        None => fake_quantize(x, spec)?,
        Some(s) => {
            if !(s > 0.0 && s.is_finite()) {
                return Err(KurtailError::InvalidArgument(format!("step size {s}")));
            }
            let groups = group_count(x, spec.granularity);
            let shifts: Vec<f64> = (0..groups)
                .map(|k| group_params(&group_values(x, spec.granularity, k), spec).1)
                .collect();
            let range = spec.code_range();
            Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                let b = shifts[group_index(spec.granularity, i, j)];
                encode(x.get(i, j), s, b, range) as f64 * s + b
            })
        }
    };
    let sum: f64 = x
        .data()
        .iter()
        .zip(deq.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / x.data().len() as f64)
}

/// MSE of the symmetric per-tensor quantizer with step `s` on a vector.
pub fn symmetric_mse(x: &[f64], bits: u32, s: f64) -> f64 {
    let q = ((1i32 << (bits - 1)) - 1) as f64;
    let sum: f64 = x
        .iter()
        .map(|v| {
            let r = (v / s).round().clamp(-q, q) * s;
            (v - r) * (v - r)
        })
        .sum();
    sum / x.len() as f64
}

const SCAN_POINTS: usize = 48;
/// Bracket width, relative to `s_naive`, at which golden-section stops.
const GOLDEN_REL_TOL: f64 = 1e-6;

/// Step size minimizing symmetric quantization MSE, searched over
/// `[0.1, 1.5] × s_naive` (`s_naive = max|x| / (2^(k−1)−1)`): a coarse scan
/// picks the bracket, then golden-section refines it.
pub fn optimal_step_size(x: &[f64], bits: u32) -> Result<f64> {
    if !(2..=24).contains(&bits) {
        return Err(KurtailError::InvalidBits(bits));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(KurtailError::NonFinite("step search input".into()));
    }
    let first = *x.first().ok_or_else(|| KurtailError::Empty("step search input".into()))?;
    if x.iter().all(|v| *v == first) {
        return Err(KurtailError::ConstantInput);
    }
    let qmax = ((1i32 << (bits - 1)) - 1) as f64;
    let s_naive = x.iter().fold(0.0f64, |m, v| m.max(v.abs())) / qmax;
    let (lo, hi) = (0.1 * s_naive, 1.5 * s_naive);
    let f = |s: f64| symmetric_mse(x, bits, s);

    let h = (hi - lo) / (SCAN_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..SCAN_POINTS).map(|i| lo + h * i as f64).collect();
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for (i, s) in grid.iter().enumerate() {
        let v = f(*s);
        if v < best_val {
            best_val = v;
            best = i;
        }
    }
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(SCAN_POINTS - 1)];

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a) > GOLDEN_REL_TOL * s_naive {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    // The scan point itself can beat the refined interior on kinked curves.
    Ok(if f(mid) <= best_val { mid } else { grid[best] })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Vanilla,
    Hadamard,
    Kurtail,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Vanilla, Condition::Hadamard, Condition::Kurtail];

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Vanilla => "vanilla",
            Condition::Hadamard => "hadamard",
            Condition::Kurtail => "kurtail",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub alphas: Vec<f64>,
    pub gamma: Vec<f64>,
    pub optimal_step: f64,
    pub condition: Option<Condition>,
    pub layer: Option<usize>,
    pub block: Option<BlockKind>,
}

impl SensitivityReport {
    pub fn labeled(mut self, layer: usize, block: BlockKind, condition: Condition) -> Self {
        self.layer = Some(layer);
        self.block = Some(block);
        self.condition = Some(condition);
        self
    }

    pub fn gamma_at(&self, alpha: f64) -> Option<f64> {
        self.alphas
            .iter()
            .position(|a| (a - alpha).abs() < 1e-12)
            .map(|i| self.gamma[i])
    }
}

/// `Γ(α) = |MSE(x, α·s̃) − MSE(x, s̃)|` for each `α`.
pub fn sensitivity(x: &[f64], bits: u32, alphas: &[f64]) -> Result<SensitivityReport> {
    if !alphas.contains(&1.0) {
        return Err(KurtailError::InvalidArgument("alphas must include 1.0".into()));
    }
    if alphas.iter().any(|a| !(*a > 0.0)) {
        return Err(KurtailError::InvalidArgument("alphas must be positive".into()));
    }
    let s_opt = optimal_step_size(x, bits)?;
    let base = symmetric_mse(x, bits, s_opt);
    let gamma = alphas
        .iter()
        .map(|a| {
            if *a == 1.0 {
                0.0
            } else {
                (symmetric_mse(x, bits, a * s_opt) - base).abs()
            }
        })
        .collect();
    Ok(SensitivityReport {
        alphas: alphas.to_vec(),
        gamma,
        optimal_step: s_opt,
        condition: None,
        layer: None,
        block: None,
    })
}

/// Round-to-nearest weights: per-column symmetric, no clipping.
pub fn rtn_quantize_weights(w: &Matrix, bits: u32) -> Result<QuantizedTensor> {
    quantize(w, &QuantSpec::weight(bits))
}
