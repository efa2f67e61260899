//! Hessian-aware weight quantization (GPTQ).
//!
//! Weights follow the row-vector convention used throughout the crate:
//! `W` is `d_in × d_out` and a layer computes `y = x · W`. Inputs are
//! quantized one row of `W` at a time; the rounding error of each row is
//! pushed onto the rows not yet quantized through the upper Cholesky factor
//! of `H⁻¹`. Scales are per output column and symmetric, exactly as RTN.

use serde::{Deserialize, Serialize};

use crate::error::{KurtailError, Result};
use crate::linalg::{cholesky, matmul, matmul_tn, spd_inverse, Matrix};
use crate::quant::{quantize, QuantSpec, QuantizedTensor};

pub const DEFAULT_DAMPING: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct HessianEstimate {
    pub h: Matrix,
    pub sample_count: usize,
    pub damping: f64,
}

impl HessianEstimate {
    pub fn from_matrix(h: Matrix, sample_count: usize, damping: f64) -> Result<Self> {
        if !h.is_square() {
            return Err(KurtailError::dims("hessian must be square"));
        }
        Ok(Self {
            h,
            sample_count,
            damping,
        })
    }

    pub fn dim(&self) -> usize {
        self.h.rows()
    }
}

/// Running `XᵀX` over calibration batches.
#[derive(Clone, Debug)]
pub struct HessianAccumulator {
    xtx: Matrix,
    count: usize,
}

impl HessianAccumulator {
    pub fn new(d_in: usize) -> Self {
        Self {
            xtx: Matrix::zeros(d_in, d_in),
            count: 0,
        }
    }

    pub fn add(&mut self, x: &Matrix) -> Result<()> {
        if x.cols() != self.xtx.rows() {
            return Err(KurtailError::dims(format!(
                "calibration batch has {} features, hessian is {}",
                x.cols(),
                self.xtx.rows()
            )));
        }
        self.xtx = self.xtx.add(&matmul_tn(x, x)?)?;
        self.count += x.rows();
        Ok(())
    }

    pub fn merge(&mut self, other: HessianAccumulator) -> Result<()> {
        if other.xtx.rows() != self.xtx.rows() {
            return Err(KurtailError::dims("merging hessians of different sizes"));
        }
        self.xtx = self.xtx.add(&other.xtx)?;
        self.count += other.count;
        Ok(())
    }

    /// `H = (2/N)·XᵀX + λI` with `λ = damping_fraction × mean(diag)`.
    pub fn finish(self, damping_fraction: f64) -> Result<HessianEstimate> {
        if self.count == 0 {
            return Err(KurtailError::Empty("no calibration rows for hessian".into()));
        }
        let n = self.xtx.rows();
        let mut h = self.xtx.scale(2.0 / self.count as f64);
        let mean_diag = (0..n).map(|i| h.get(i, i)).sum::<f64>() / n as f64;
        let lambda = if mean_diag > 0.0 {
            damping_fraction * mean_diag
        } else {
            damping_fraction
        };
        for i in 0..n {
            h.set(i, i, h.get(i, i) + lambda);
        }
        Ok(HessianEstimate {
            h,
            sample_count: self.count,
            damping: lambda,
        })
    }
}

pub fn collect_hessian(x: &Matrix, damping_fraction: f64) -> Result<HessianEstimate> {
    if x.rows() == 0 {
        return Err(KurtailError::Empty("no calibration rows for hessian".into()));
    }
    let mut acc = HessianAccumulator::new(x.cols());
    acc.add(x)?;
    acc.finish(damping_fraction)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GptqConfig {
    pub bits: u32,
    /// Process inputs in order of decreasing Hessian diagonal.
    pub act_order: bool,
}

impl GptqConfig {
    pub fn new(bits: u32) -> Self {
        Self {
            bits,
            act_order: false,
        }
    }
}

pub fn gptq_quantize(w: &Matrix, h: &HessianEstimate, bits: u32) -> Result<QuantizedTensor> {
    gptq_quantize_with(w, h, &GptqConfig::new(bits))
}

pub fn gptq_quantize_with(w: &Matrix, h: &HessianEstimate, config: &GptqConfig) -> Result<QuantizedTensor> {
    let (d_in, d_out) = w.shape();
    if h.dim() != d_in {
        return Err(KurtailError::dims(format!(
            "hessian is {0}x{0}, weight has {d_in} inputs",
            h.dim()
        )));
    }
    let spec = QuantSpec::weight(config.bits);
    // Same per-column scales as RTN.
    let base = quantize(w, &spec)?;
    let scales = base.scales.clone();
    let (lo, hi) = spec.code_range();

    let perm: Vec<usize> = if config.act_order {
        let mut p: Vec<usize> = (0..d_in).collect();
        p.sort_by(|&a, &b| h.h.get(b, b).total_cmp(&h.h.get(a, a)).then(a.cmp(&b)));
        p
    } else {
        (0..d_in).collect()
    };
    let mut hp = Matrix::from_fn(d_in, d_in, |i, j| h.h.get(perm[i], perm[j]));
    let mut wk = w.select_rows(&perm);
    for i in 0..d_in {
        if hp.get(i, i) == 0.0 {
            hp.set(i, i, 1.0);
            wk.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let hinv = spd_inverse(&hp)?;
    let upper = cholesky(&hinv)?.transpose();

    let mut codes_p = vec![0i32; d_in * d_out];
    for i in 0..d_in {
        let d = upper.get(i, i);
        let mut err = vec![0.0; d_out];
        for j in 0..d_out {
            let v = wk.get(i, j);
            let c = (v / scales[j]).round().clamp(lo as f64, hi as f64);
            codes_p[i * d_out + j] = c as i32;
            err[j] = (v - c * scales[j]) / d;
        }
        for r in i + 1..d_in {
            let u = upper.get(i, r);
            if u == 0.0 {
                continue;
            }
            for (wv, e) in wk.row_mut(r).iter_mut().zip(&err) {
                *wv -= e * u;
            }
        }
    }

    let mut codes = vec![0i32; d_in * d_out];
    for (pi, &orig) in perm.iter().enumerate() {
        codes[orig * d_out..(orig + 1) * d_out]
            .copy_from_slice(&codes_p[pi * d_out..(pi + 1) * d_out]);
    }
    Ok(QuantizedTensor {
        rows: d_in,
        cols: d_out,
        codes,
        scales,
        shifts: vec![0.0; d_out],
        spec,
    })
}

/// `tr((W − Ŵ)ᵀ H (W − Ŵ))`, the layer-output error GPTQ minimizes.
pub fn proxy_loss(w: &Matrix, w_hat: &Matrix, h: &Matrix) -> Result<f64> {
    let d = w.sub(w_hat)?;
    let hd = matmul(h, &d)?;
    Ok(d.data().iter().zip(hd.data()).map(|(a, b)| a * b).sum())
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::quant::{dequantize, rtn_quantize_weights};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn identity_hessian_reduces_to_rtn(d_in in 1usize..24, d_out in 1usize..12, bits in 2u32..9, seed in any::<u64>()) {
            let w = Matrix::gaussian(d_in, d_out, &mut ChaCha8Rng::seed_from_u64(seed));
            let h = HessianEstimate::from_matrix(Matrix::identity(d_in), 1, 0.0).unwrap();
            let g = dequantize(&gptq_quantize(&w, &h, bits).unwrap());
            let r = dequantize(&rtn_quantize_weights(&w, bits).unwrap());
            prop_assert!(g.max_abs_diff(&r) < 1e-12);
        }

        #[test]
        fn proxy_loss_is_nonnegative(d in 2usize..16, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::gaussian(4 * d, d, &mut rng);
            let w = Matrix::gaussian(d, 5, &mut rng);
            let h = collect_hessian(&x, 0.01).unwrap();
            let w_hat = dequantize(&gptq_quantize(&w, &h, 3).unwrap());
            prop_assert!(proxy_loss(&w, &w_hat, &h.h).unwrap() >= 0.0);
            prop_assert_eq!(proxy_loss(&w, &w, &h.h).unwrap(), 0.0);
        }
    }
}
