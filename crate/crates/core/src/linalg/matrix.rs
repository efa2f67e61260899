use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{KurtailError, Result};

/// Work (rows * inner * cols) above which `matmul` splits output rows across
/// the rayon pool. Each output row is still accumulated in a fixed order, so
/// results do not depend on the number of workers.
const PAR_THRESHOLD: usize = 1 << 18;

/// Dense row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(KurtailError::dims(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(KurtailError::NonFinite("matrix data".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(KurtailError::dims("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Standard-normal entries drawn in row-major order.
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(KurtailError::dims(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest entrywise absolute difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + width]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(KurtailError::dims("vstack column counts differ"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Reshape without copying; the element count must match.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows * cols != self.data.len() {
            return Err(KurtailError::dims(format!(
                "cannot reshape {}x{} into {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        Ok(Matrix {
            rows,
            cols,
            data: self.data,
        })
    }

    /// Round every entry through `f32`.
    pub fn round_to_f32(&self) -> Matrix {
        self.map(|v| v as f32 as f64)
    }
}

/// `a * b` with a fixed i-k-j accumulation order per output row.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(KurtailError::dims(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = Matrix::zeros(n, m);
    if m == 0 {
        return Ok(out);
    }
    let row_kernel = |i: usize, out_row: &mut [f64]| {
        let a_row = a.row(i);
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = b.row(k);
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };
    if n * a.cols * m >= PAR_THRESHOLD {
        out.data
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, r)| row_kernel(i, r));
    } else {
        out.data
            .chunks_mut(m)
            .enumerate()
            .for_each(|(i, r)| row_kernel(i, r));
    }
    Ok(out)
}

/// `aᵀ * b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(KurtailError::dims(format!(
            "matmul_tn {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for t in 0..a.rows {
        let (ar, br) = (a.row(t), b.row(t));
        for (i, &ai) in ar.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let o = out.row_mut(i);
            for (ov, bv) in o.iter_mut().zip(br) {
                *ov += ai * bv;
            }
        }
    }
    Ok(out)
}

/// LU factorization with partial pivoting, stored compactly.
struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

fn lu_factor(a: &Matrix) -> Result<Lu> {
    if !a.is_square() {
        return Err(KurtailError::dims("LU needs a square matrix"));
    }
    let n = a.rows;
    let mut lu = a.data.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for k in 0..n {
        let (p, pv) = (k..n)
            .map(|i| (i, lu[i * n + k].abs()))
            .fold((k, -1.0), |best, c| if c.1 > best.1 { c } else { best });
        if pv <= 1e-14 * scale {
            return Err(KurtailError::Singular(format!("zero pivot in column {k}")));
        }
        if p != k {
            for j in 0..n {
                lu.swap(k * n + j, p * n + j);
            }
            perm.swap(k, p);
            sign = -sign;
        }
        let d = lu[k * n + k];
        for i in k + 1..n {
            let f = lu[i * n + k] / d;
            lu[i * n + k] = f;
            if f != 0.0 {
                for j in k + 1..n {
                    lu[i * n + j] -= f * lu[k * n + j];
                }
            }
        }
    }
    Ok(Lu { n, lu, perm, sign })
}

impl Lu {
    fn solve_in_place(&self, b: &mut Matrix) {
        let n = self.n;
        let m = b.cols;
        let permuted: Vec<f64> = self
            .perm
            .iter()
            .flat_map(|&p| b.row(p).to_vec())
            .collect();
        b.data.copy_from_slice(&permuted);
        for i in 0..n {
            for k in 0..i {
                let f = self.lu[i * n + k];
                if f != 0.0 {
                    for j in 0..m {
                        b.data[i * m + j] -= f * b.data[k * m + j];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let f = self.lu[i * n + k];
                if f != 0.0 {
                    for j in 0..m {
                        b.data[i * m + j] -= f * b.data[k * m + j];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..m {
                b.data[i * m + j] /= d;
            }
        }
    }

    fn determinant(&self) -> f64 {
        (0..self.n).fold(self.sign, |acc, i| acc * self.lu[i * self.n + i])
    }
}

/// Solves `a * x = b` for `x`.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(KurtailError::dims("solve: right-hand side rows differ"));
    }
    let lu = lu_factor(a)?;
    let mut x = b.clone();
    lu.solve_in_place(&mut x);
    Ok(x)
}

pub fn determinant(a: &Matrix) -> Result<f64> {
    match lu_factor(a) {
        Ok(lu) => Ok(lu.determinant()),
        Err(KurtailError::Singular(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = a`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(KurtailError::dims("cholesky needs a square matrix"));
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(sum > 0.0) {
                    return Err(KurtailError::CholeskyFailed(i));
                }
                l.set(i, i, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let l = cholesky(a)?;
    let n = a.rows;
    // L⁻¹ by forward substitution, then (L⁻¹)ᵀ L⁻¹.
    let mut linv = Matrix::zeros(n, n);
    for i in 0..n {
        linv.set(i, i, 1.0 / l.get(i, i));
        for j in 0..i {
            let mut sum = 0.0;
            for k in j..i {
                sum += l.get(i, k) * linv.get(k, j);
            }
            linv.set(i, j, -sum / l.get(i, i));
        }
    }
    matmul_tn(&linv, &linv)
}
