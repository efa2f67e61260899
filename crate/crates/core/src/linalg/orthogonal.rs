use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{determinant, matmul, matmul_tn, Matrix};
use crate::error::{KurtailError, Result};

pub const DEFAULT_ORTHO_TOL: f64 = 1e-6;

/// A square matrix certified to satisfy `‖QᵀQ − I‖∞ ≤ tolerance`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthogonalMatrix {
    inner: Matrix,
    tolerance: f64,
}

impl OrthogonalMatrix {
    /// Certifies `m` as orthogonal within `tolerance` (and `|det| ≈ 1`).
    pub fn new(m: Matrix, tolerance: f64) -> Result<Self> {
        if !m.is_square() {
            return Err(KurtailError::dims(format!(
                "orthogonal matrix must be square, got {:?}",
                m.shape()
            )));
        }
        let defect = orthogonality_defect(&m);
        if !(defect <= tolerance) {
            return Err(KurtailError::InvalidArgument(format!(
                "orthogonality defect {defect:e} exceeds tolerance {tolerance:e}"
            )));
        }
        let det = determinant(&m)?;
        if (det.abs() - 1.0).abs() > 1e-4 {
            return Err(KurtailError::InvalidArgument(format!(
                "determinant magnitude {det} is not 1"
            )));
        }
        Ok(Self {
            inner: m,
            tolerance,
        })
    }

    pub fn certify(m: Matrix) -> Result<Self> {
        Self::new(m, DEFAULT_ORTHO_TOL)
    }

    /// For constructions that are orthogonal by algebra (Hadamard, transposes,
    /// block diagonals of certified blocks), where an `O(n³)` check is waste.
    pub(crate) fn from_exact(m: Matrix) -> Self {
        debug_assert!(m.is_square());
        Self {
            inner: m,
            tolerance: DEFAULT_ORTHO_TOL,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_exact(Matrix::identity(n))
    }

    pub fn dim(&self) -> usize {
        self.inner.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.inner
    }

    pub fn into_matrix(self) -> Matrix {
        self.inner
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    /// The inverse, which for an orthogonal matrix is its transpose.
    pub fn transpose(&self) -> OrthogonalMatrix {
        Self {
            inner: self.inner.transpose(),
            tolerance: self.tolerance,
        }
    }

    pub fn defect(&self) -> f64 {
        orthogonality_defect(&self.inner)
    }

    /// `self * other`, re-certified.
    pub fn compose(&self, other: &OrthogonalMatrix) -> Result<OrthogonalMatrix> {
        let m = matmul(&self.inner, &other.inner)?;
        Self::new(m, self.tolerance.max(other.tolerance))
    }

    /// Right-multiplies every row of `x`: returns `x · Q`.
    pub fn apply_rows(&self, x: &Matrix) -> Result<Matrix> {
        matmul(x, &self.inner)
    }

    /// `diag(Q, Q, …, Q)` with `copies` blocks.
    pub fn block_diagonal(&self, copies: usize) -> OrthogonalMatrix {
        let b = self.dim();
        let n = b * copies;
        let mut m = Matrix::zeros(n, n);
        for c in 0..copies {
            for i in 0..b {
                for j in 0..b {
                    m.set(c * b + i, c * b + j, self.inner.get(i, j));
                }
            }
        }
        Self {
            inner: m,
            tolerance: self.tolerance,
        }
    }
}

/// `max |(QᵀQ − I)_ij|`.
pub fn orthogonality_defect(q: &Matrix) -> f64 {
    let Ok(gram) = matmul_tn(q, q) else {
        return f64::INFINITY;
    };
    let mut worst: f64 = 0.0;
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.get(i, j) - target).abs());
        }
    }
    worst
}

/// Q factor of a Householder QR, with column signs chosen so that `R` has a
/// positive diagonal. That makes the output unique for full-rank input.
pub fn qr_orthogonalize(a: &Matrix) -> Result<OrthogonalMatrix> {
    if !a.is_square() {
        return Err(KurtailError::dims("qr_orthogonalize needs a square matrix"));
    }
    let n = a.rows();
    if n == 0 {
        return Err(KurtailError::Empty("0x0 matrix".into()));
    }
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut diag = vec![0.0; n];

    for k in 0..n {
        let norm = (k..n).map(|i| r.get(i, k).powi(2)).sum::<f64>().sqrt();
        let x0 = r.get(k, k);
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| r.get(i, k)).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm > 0.0 {
            v.iter_mut().for_each(|x| *x /= vnorm);
            for j in k..n {
                let dot: f64 = (k..n).map(|i| v[i - k] * r.get(i, j)).sum();
                for i in k..n {
                    let val = r.get(i, j) - 2.0 * v[i - k] * dot;
                    r.set(i, j, val);
                }
            }
        }
        diag[k] = r.get(k, k);
        reflectors.push(v);
    }

    let largest = diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let smallest = diag.iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
    if !(smallest > 1e-10 * largest) {
        return Err(KurtailError::RankDeficient);
    }

    // Q = H_0 H_1 … H_{n-1}, built by applying reflectors to I in reverse.
    let mut q = Matrix::identity(n);
    for k in (0..n).rev() {
        let v = &reflectors[k];
        for j in 0..n {
            let dot: f64 = (k..n).map(|i| v[i - k] * q.get(i, j)).sum();
            if dot != 0.0 {
                for i in k..n {
                    let val = q.get(i, j) - 2.0 * v[i - k] * dot;
                    q.set(i, j, val);
                }
            }
        }
    }
    for (j, d) in diag.iter().enumerate() {
        if *d < 0.0 {
            for i in 0..n {
                let val = -q.get(i, j);
                q.set(i, j, val);
            }
        }
    }
    OrthogonalMatrix::new(q, DEFAULT_ORTHO_TOL)
}

/// Haar-style random rotation: QR of a seeded Gaussian matrix.
pub fn random_orthogonal(n: usize, seed: u64) -> Result<OrthogonalMatrix> {
    if n == 0 {
        return Err(KurtailError::InvalidArgument(
            "random_orthogonal needs n >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    qr_orthogonalize(&Matrix::gaussian(n, n, &mut rng))
}

/// Plain serializable form used by rotation files.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Matrix> for MatrixRecord {
    fn from(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().to_vec(),
        }
    }
}

impl TryFrom<MatrixRecord> for Matrix {
    type Error = KurtailError;

    fn try_from(r: MatrixRecord) -> Result<Self> {
        Matrix::new(r.rows, r.cols, r.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_maps_to_identity() {
        let q = qr_orthogonalize(&Matrix::identity(5)).unwrap();
        assert_eq!(q.matrix(), &Matrix::identity(5));
    }

    #[test]
    fn idempotent_on_orthogonal_input() {
        let q = random_orthogonal(12, 4).unwrap();
        let again = qr_orthogonalize(q.matrix()).unwrap();
        assert!(again.matrix().max_abs_diff(q.matrix()) <= 1e-10);
    }

    #[test]
    fn random_square_becomes_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Matrix::gaussian(16, 16, &mut rng);
        let q = qr_orthogonalize(&a).unwrap();
        assert!(q.defect() <= 1e-12);
        // R = Qᵀ A must be upper triangular with positive diagonal.
        let r = matmul_tn(q.matrix(), &a).unwrap();
        for i in 0..16 {
            assert!(r.get(i, i) > 0.0);
            for j in 0..i {
                assert!(r.get(i, j).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rank_deficient_is_rejected() {
        let mut a = Matrix::identity(4);
        a.set(3, 3, 0.0);
        assert!(matches!(
            qr_orthogonalize(&a),
            Err(KurtailError::RankDeficient)
        ));
    }

    #[test]
    fn random_orthogonal_is_deterministic() {
        let one = random_orthogonal(1, 9).unwrap();
        assert_eq!(one.matrix().get(0, 0).abs(), 1.0);
        assert_eq!(one, random_orthogonal(1, 9).unwrap());
        let a = random_orthogonal(64, 123).unwrap();
        let b = random_orthogonal(64, 123).unwrap();
        assert_eq!(a, b);
        assert!(a.defect() <= 1e-10);
        assert_ne!(a, random_orthogonal(64, 124).unwrap());
        assert!(random_orthogonal(0, 1).is_err());
    }

    #[test]
    fn certification_rejects_non_orthogonal() {
        assert!(OrthogonalMatrix::certify(Matrix::diagonal(&[1.0, 2.0])).is_err());
        assert!(OrthogonalMatrix::certify(Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn block_diagonal_stays_orthogonal() {
        let q = random_orthogonal(4, 2).unwrap();
        let big = q.block_diagonal(3);
        assert_eq!(big.dim(), 12);
        assert!(big.defect() < 1e-12);
        assert_eq!(big.matrix().get(5, 0), 0.0);
    }
}
