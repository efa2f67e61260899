use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use super::orthogonal::OrthogonalMatrix;
use crate::error::{KurtailError, Result};

fn check_pow2(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(KurtailError::NotPowerOfTwo(n));
    }
    Ok(())
}

/// Normalized Sylvester Hadamard matrix of order `n`.
pub fn hadamard_matrix(n: usize) -> Result<OrthogonalMatrix> {
    check_pow2(n)?;
    let c = 1.0 / (n as f64).sqrt();
    let m = Matrix::from_fn(n, n, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            c
        } else {
            -c
        }
    });
    Ok(OrthogonalMatrix::from_exact(m))
}

/// In-place unnormalized Walsh-Hadamard butterfly (Sylvester ordering).
pub fn fwht_in_place(x: &mut [f64]) {
    let n = x.len();
    let mut h = 1;
    while h < n {
        for block in (0..n).step_by(2 * h) {
            for i in block..block + h {
                let (a, b) = (x[i], x[i + h]);
                x[i] = a + b;
                x[i + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// `H x` in `O(n log n)`. With `normalize` the output is scaled by `1/√n`,
/// matching [`hadamard_matrix`] and making the transform an involution.
pub fn fast_hadamard_transform(x: &[f64], normalize: bool) -> Result<Vec<f64>> {
    check_pow2(x.len())?;
    let mut out = x.to_vec();
    fwht_in_place(&mut out);
    if normalize {
        let c = 1.0 / (x.len() as f64).sqrt();
        out.iter_mut().for_each(|v| *v *= c);
    }
    Ok(out)
}

/// `D·H` with `D = diag(signs)`. Applied online through the fast transform.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomizedHadamard {
    signs: Vec<f64>,
}

impl RandomizedHadamard {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        check_pow2(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let signs = (0..n)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Ok(Self { signs })
    }

    pub fn with_signs(signs: Vec<f64>) -> Result<Self> {
        check_pow2(signs.len())?;
        if signs.iter().any(|s| s.abs() != 1.0) {
            return Err(KurtailError::InvalidArgument("signs must be ±1".into()));
        }
        Ok(Self { signs })
    }

    pub fn dim(&self) -> usize {
        self.signs.len()
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    /// Row-vector product `x · (D H)` in place.
    pub fn apply_row(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.signs.len());
        for (v, s) in x.iter_mut().zip(&self.signs) {
            *v *= s;
        }
        fwht_in_place(x);
        let c = 1.0 / (x.len() as f64).sqrt();
        x.iter_mut().for_each(|v| *v *= c);
    }

    pub fn to_orthogonal(&self) -> OrthogonalMatrix {
        let n = self.dim();
        let h = hadamard_matrix(n).expect("dimension checked at construction");
        let m = Matrix::from_fn(n, n, |i, j| self.signs[i] * h.matrix().get(i, j));
        OrthogonalMatrix::from_exact(m)
    }
}

/// Dense `D·H` with a seeded random ±1 diagonal `D`.
pub fn randomized_hadamard(n: usize, seed: u64) -> Result<OrthogonalMatrix> {
    Ok(RandomizedHadamard::new(n, seed)?.to_orthogonal())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul;
    use rand_distr::StandardNormal;

    fn dense_apply(h: &OrthogonalMatrix, x: &[f64]) -> Vec<f64> {
        let col = Matrix::new(x.len(), 1, x.to_vec()).unwrap();
        matmul(h.matrix(), &col).unwrap().into_data()
    }

    #[test]
    fn small_orders() {
        assert_eq!(hadamard_matrix(1).unwrap().matrix().data(), &[1.0]);
        let c = 1.0 / 2f64.sqrt();
        assert_eq!(hadamard_matrix(2).unwrap().matrix().data(), &[c, c, c, -c]);
        assert!(hadamard_matrix(8).unwrap().defect() <= 1e-12);
        assert!(matches!(
            hadamard_matrix(12),
            Err(KurtailError::NotPowerOfTwo(12))
        ));
    }

    #[test]
    fn impulse_response_and_involution() {
        let y = fast_hadamard_transform(&[1.0, 0.0, 0.0, 0.0], true).unwrap();
        assert_eq!(y, vec![0.5; 4]);
        let x = [0.3, -1.2, 4.0, 0.5, 2.0, 0.0, -0.7, 1.1];
        let back = fast_hadamard_transform(&fast_hadamard_transform(&x, true).unwrap(), true)
            .unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(fast_hadamard_transform(&[1.0; 6], true).is_err());
    }

    #[test]
    fn fast_matches_dense_256() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..256).map(|_| rng.sample(StandardNormal)).collect();
        let fast = fast_hadamard_transform(&x, true).unwrap();
        let dense = dense_apply(&hadamard_matrix(256).unwrap(), &x);
        for (a, b) in fast.iter().zip(&dense) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn randomized_hand_expansion() {
        let rh = RandomizedHadamard::with_signs(vec![1.0, -1.0]).unwrap();
        let c = 1.0 / 2f64.sqrt();
        assert_eq!(rh.to_orthogonal().matrix().data(), &[c, c, -c, c]);
        assert_eq!(
            randomized_hadamard(16, 3).unwrap(),
            randomized_hadamard(16, 3).unwrap()
        );
        assert!(randomized_hadamard(32, 8).unwrap().defect() <= 1e-12);
        assert!(randomized_hadamard(24, 8).is_err());
    }

    #[test]
    fn online_application_matches_dense_row_product() {
        let rh = RandomizedHadamard::new(16, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::gaussian(1, 16, &mut rng);
        let dense = rh.to_orthogonal().apply_rows(&x).unwrap();
        let mut row = x.row(0).to_vec();
        rh.apply_row(&mut row);
        for (a, b) in row.iter().zip(dense.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
