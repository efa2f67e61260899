//! Kurtosis, the kurtosis-matching loss and its analytic gradient.
//!
//! All moments are population moments (divide by `n`). The loss compares the
//! plain kurtosis `μ₄/σ⁴` of each group against a target, by default that of
//! a uniform distribution (`9/5`).

use crate::error::{KurtailError, Result};
use crate::linalg::Matrix;

/// Kurtosis of the continuous uniform distribution.
pub const UNIFORM_KURTOSIS: f64 = 1.8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KurtosisValue {
    pub kappa: f64,
    pub n: usize,
    pub mean: f64,
    pub sigma: f64,
}

struct Moments {
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

fn moments(x: &[f64]) -> Result<Moments> {
    if x.len() < 4 {
        return Err(KurtailError::TooShort {
            needed: 4,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(KurtailError::NonFinite("kurtosis input".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(m2.sqrt() >= 1e-12 * scale) || m2 == 0.0 {
        return Err(KurtailError::ConstantInput);
    }
    Ok(Moments { mean, m2, m3, m4 })
}

pub fn kurtosis(x: &[f64]) -> Result<KurtosisValue> {
    let m = moments(x)?;
    Ok(KurtosisValue {
        kappa: m.m4 / (m.m2 * m.m2),
        n: x.len(),
        mean: m.mean,
        sigma: m.m2.sqrt(),
    })
}

/// `∂κ/∂xᵢ = (4/n)·[(xᵢ−μ)³ − m₃ − κσ²(xᵢ−μ)] / σ⁴`.
pub fn kurtosis_gradient(x: &[f64]) -> Result<Vec<f64>> {
    Ok(kurtosis_with_gradient(x)?.1)
}

pub fn kurtosis_with_gradient(x: &[f64]) -> Result<(KurtosisValue, Vec<f64>)> {
    let m = moments(x)?;
    let kappa = m.m4 / (m.m2 * m.m2);
    let coef = 4.0 / (x.len() as f64 * m.m2 * m.m2);
    let grad = x
        .iter()
        .map(|v| {
            let d = v - m.mean;
            coef * (d * d * d - m.m3 - kappa * m.m2 * d)
        })
        .collect();
    let value = KurtosisValue {
        kappa,
        n: x.len(),
        mean: m.mean,
        sigma: m.m2.sqrt(),
    };
    Ok((value, grad))
}

/// Mean over groups of `|κ(concat(group)) − κ_u|`. Each matrix is one group
/// (a layer/block's tokens); its entries are flattened before measuring.
pub fn kurtosis_loss(groups: &[&Matrix], kappa_u: f64) -> Result<f64> {
    Ok(kurtosis_loss_with_gradient(groups, kappa_u, false)?.0)
}

/// Loss plus, when `with_grad`, its gradient with respect to every group's
/// entries (same shapes as the inputs). The `|·|` subgradient at exactly 0
/// is taken as 0.
pub fn kurtosis_loss_with_gradient(
    groups: &[&Matrix],
    kappa_u: f64,
    with_grad: bool,
) -> Result<(f64, Vec<Matrix>)> {
    if groups.is_empty() {
        return Err(KurtailError::Empty("kurtosis loss needs at least one group".into()));
    }
    let l = groups.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(if with_grad { groups.len() } else { 0 });
    for g in groups {
        if g.data().is_empty() {
            return Err(KurtailError::Empty("kurtosis loss group".into()));
        }
        if with_grad {
            let (k, dk) = kurtosis_with_gradient(g.data())?;
            let diff = k.kappa - kappa_u;
            loss += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            let data = dk.into_iter().map(|v| v * sign / l).collect();
            grads.push(Matrix::new(g.rows(), g.cols(), data)?);
        } else {
            loss += (kurtosis(g.data())?.kappa - kappa_u).abs();
        }
    }
    Ok((loss / l, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn uniform(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn col(x: Vec<f64>) -> Matrix {
        let n = x.len();
        Matrix::new(n, 1, x).unwrap()
    }

    #[test]
    fn reference_distributions() {
        assert!((kurtosis(&normal(400_000, 1)).unwrap().kappa - 3.0).abs() < 0.05);
        assert!((kurtosis(&uniform(400_000, 2)).unwrap().kappa - 1.8).abs() < 0.02);
        let two_point: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        assert_eq!(kurtosis(&two_point).unwrap().kappa, 1.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            kurtosis(&[2.0; 10]),
            Err(KurtailError::ConstantInput)
        ));
        assert!(matches!(
            kurtosis(&[1.0, 2.0, 3.0]),
            Err(KurtailError::TooShort { .. })
        ));
        assert!(kurtosis(&[1.0, 2.0, f64::NAN, 4.0]).is_err());
        assert!(kurtosis_loss(&[], 1.8).is_err());
    }

    #[test]
    fn loss_reference_values() {
        let u = col(uniform(400_000, 3));
        assert!(kurtosis_loss(&[&u], UNIFORM_KURTOSIS).unwrap() <= 0.03);
        let g = col(normal(400_000, 4));
        assert!((kurtosis_loss(&[&g], UNIFORM_KURTOSIS).unwrap() - 1.2).abs() < 0.05);
    }

    #[test]
    fn loss_averages_groups() {
        // κ = 1.8 and κ = 4.8 measured independently, then averaged by hand.
        let a = col(uniform(1000, 5));
        let b = col(normal(1000, 6).iter().map(|v| v * v * v).collect());
        let ka = kurtosis(a.data()).unwrap().kappa;
        let kb = kurtosis(b.data()).unwrap().kappa;
        let expected = ((ka - 1.8).abs() + (kb - 1.8).abs()) / 2.0;
        assert!((kurtosis_loss(&[&a, &b], 1.8).unwrap() - expected).abs() < 1e-12);
        // Exact two-group case: ±1 has κ = 1, {0 ×(n−2), ±c} has κ = n/2.
        let flat = col((0..8).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect());
        let mut spiky = vec![0.0; 12];
        spiky[0] = 1.0;
        spiky[1] = -1.0;
        let spiky = col(spiky);
        assert_eq!(kurtosis(spiky.data()).unwrap().kappa, 6.0);
        let loss = kurtosis_loss(&[&flat, &spiky], 1.8).unwrap();
        assert!((loss - (0.8 + 4.2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_antisymmetric_for_symmetric_sample() {
        let x = [-2.0, -0.5, 0.5, 2.0, -1.0, 1.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let g = kurtosis_gradient(&x).unwrap();
        let gn = kurtosis_gradient(&neg).unwrap();
        for (a, b) in g.iter().zip(&gn) {
            assert!((a + b).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_orthogonal_to_shift_and_scale() {
        let x = normal(64, 9);
        let g = kurtosis_gradient(&x).unwrap();
        let sum: f64 = g.iter().sum();
        assert!(sum.abs() <= 1e-10);
        let mean = x.iter().sum::<f64>() / 64.0;
        let radial: f64 = g.iter().zip(&x).map(|(gi, xi)| gi * (xi - mean)).sum();
        assert!(radial.abs() <= 1e-10);
    }

    #[test]
    fn affine_invariance() {
        let x = normal(500, 10);
        let k = kurtosis(&x).unwrap().kappa;
        let y: Vec<f64> = x.iter().map(|v| -3.5 * v + 7.0).collect();
        assert!((kurtosis(&y).unwrap().kappa - k).abs() <= 1e-10 * k);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn spread() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-50.0f64..50.0, 4..200)
            .prop_filter("needs spread", |v| v.iter().any(|x| (x - v[0]).abs() > 1e-3))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn affine_invariant(x in spread(), a in prop_oneof![-20.0f64..-0.05, 0.05f64..20.0], b in -100.0f64..100.0) {
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let (kx, ky) = (kurtosis(&x).unwrap().kappa, kurtosis(&y).unwrap().kappa);
            prop_assert!((kx - ky).abs() <= 1e-7 * kx);
        }

        #[test]
        fn pearson_lower_bound(x in spread()) {
            prop_assert!(kurtosis(&x).unwrap().kappa >= 1.0 - 1e-12);
        }

        #[test]
        fn order_does_not_matter(mut x in spread()) {
            let k = kurtosis(&x).unwrap().kappa;
            x.reverse();
            x.rotate_left(1);
            prop_assert!((k - kurtosis(&x).unwrap().kappa).abs() <= 1e-10 * k);
        }
    }
}
