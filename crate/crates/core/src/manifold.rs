//! Cayley-transform optimizers on the orthogonal group.
//!
//! A Euclidean gradient `G` at `W` is turned into the skew-symmetric
//! generator `A = G Wᵀ − W Gᵀ`; descent moves along `−A W` and the Cayley
//! map `(I − τA/2)⁻¹ (I + τA/2) W` keeps the iterate orthogonal.

use serde::{Deserialize, Serialize};

use crate::error::{KurtailError, Result};
use crate::linalg::{matmul, qr_orthogonalize, solve, Matrix, OrthogonalMatrix, DEFAULT_ORTHO_TOL};

/// Above this order the retraction switches from a direct solve to the
/// fixed-point iteration.
pub const DIRECT_SOLVE_MAX_DIM: usize = 512;

/// Drift from orthogonality that triggers a QR re-orthogonalization.
pub const REORTHO_TRIGGER: f64 = 1e-8;

pub fn skew_project(grad: &Matrix, w: &OrthogonalMatrix) -> Result<Matrix> {
    if grad.shape() != w.matrix().shape() {
        return Err(KurtailError::dims(format!(
            "gradient {:?} vs parameter {:?}",
            grad.shape(),
            w.matrix().shape()
        )));
    }
    let gw = matmul(grad, &w.matrix().transpose())?;
    let n = gw.rows();
    // A = GWᵀ − (GWᵀ)ᵀ, written entrywise so the result is exactly skew.
    Ok(Matrix::from_fn(n, n, |i, j| gw.get(i, j) - gw.get(j, i)))
}

fn skew_defect(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((a.get(i, j) + a.get(j, i)).abs());
        }
    }
    worst
}

/// `W⁺ = (I − (τ/2)A)⁻¹ (I + (τ/2)A) W`.
pub fn cayley_retract(
    w: &OrthogonalMatrix,
    a: &Matrix,
    step: f64,
    iterations: usize,
) -> Result<OrthogonalMatrix> {
    let n = w.dim();
    if a.shape() != (n, n) {
        return Err(KurtailError::dims("generator shape differs from parameter"));
    }
    if skew_defect(a) > 1e-10 * a.max_abs().max(1.0) {
        return Err(KurtailError::InvalidArgument(
            "cayley generator is not skew-symmetric".into(),
        ));
    }
    if !step.is_finite() {
        return Err(KurtailError::NonFinite("cayley step".into()));
    }
    if step == 0.0 {
        return Ok(w.clone());
    }
    let half = 0.5 * step;
    let y = if n <= DIRECT_SOLVE_MAX_DIM {
        let lhs = Matrix::from_fn(n, n, |i, j| {
            (if i == j { 1.0 } else { 0.0 }) - half * a.get(i, j)
        });
        let aw = matmul(a, w.matrix())?;
        let rhs = w.matrix().add(&aw.scale(half))?;
        solve(&lhs, &rhs).map_err(|_| {
            KurtailError::Singular("I - (step/2)A is singular; step too large".into())
        })?
    } else {
        let aw = matmul(a, w.matrix())?;
        let mut y = w.matrix().add(&aw.scale(step))?;
        for _ in 0..iterations {
            let sum = w.matrix().add(&y)?;
            y = w.matrix().add(&matmul(a, &sum)?.scale(half))?;
        }
        y
    };
    if !y.is_finite() {
        return Err(KurtailError::NonFinite("cayley retraction".into()));
    }
    if crate::linalg::orthogonality_defect(&y) > REORTHO_TRIGGER {
        return qr_orthogonalize(&y);
    }
    OrthogonalMatrix::new(y, DEFAULT_ORTHO_TOL)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondMoment {
    /// One running average of `‖A‖²_F` for the whole matrix.
    Scalar,
    Elementwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CayleyConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Heavy-ball coefficient for the SGD variant.
    pub momentum: f64,
    pub cayley_iterations: usize,
    pub second_moment: SecondMoment,
    /// When set, the learning rate follows a cosine decay to zero over this
    /// many steps.
    pub total_steps: Option<usize>,
}

impl Default for CayleyConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            momentum: 0.9,
            cayley_iterations: 3,
            second_moment: SecondMoment::Scalar,
            total_steps: None,
        }
    }
}

impl CayleyConfig {
    /// Learning rate for the 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        match self.total_steps {
            Some(total) if total > 0 => {
                let progress = ((t.saturating_sub(1)) as f64 / total as f64).min(1.0);
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            _ => self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SecondMomentState {
    Scalar(f64),
    Elementwise(Matrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CayleyOptimizerState {
    pub momentum: Matrix,
    pub second_moment: SecondMomentState,
    pub step_count: u64,
}

impl CayleyOptimizerState {
    pub fn new(n: usize, kind: SecondMoment) -> Self {
        Self {
            momentum: Matrix::zeros(n, n),
            second_moment: match kind {
                SecondMoment::Scalar => SecondMomentState::Scalar(0.0),
                SecondMoment::Elementwise => SecondMomentState::Elementwise(Matrix::zeros(n, n)),
            },
            step_count: 0,
        }
    }
}

fn check_grad(grad: &Matrix, w: &OrthogonalMatrix, state: &CayleyOptimizerState) -> Result<()> {
    if !grad.is_finite() {
        return Err(KurtailError::NonFinite("gradient".into()));
    }
    if state.momentum.shape() != w.matrix().shape() {
        return Err(KurtailError::dims("optimizer state does not match parameter"));
    }
    Ok(())
}

/// One Cayley-Adam step. Moments are tracked on the skew generator.
pub fn cayley_adam_step(
    w: &OrthogonalMatrix,
    grad: &Matrix,
    state: &mut CayleyOptimizerState,
    config: &CayleyConfig,
) -> Result<OrthogonalMatrix> {
    check_grad(grad, w, state)?;
    let a = skew_project(grad, w)?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    state.momentum = state.momentum.scale(b1).add(&a.scale(1.0 - b1))?;
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let lr = config.lr_at(state.step_count);

    let direction = match &mut state.second_moment {
        SecondMomentState::Scalar(v) => {
            let sq = a.data().iter().map(|x| x * x).sum::<f64>();
            *v = b2 * *v + (1.0 - b2) * sq;
            let denom = (*v / bias2).sqrt() + config.eps;
            state.momentum.scale(1.0 / (bias1 * denom))
        }
        SecondMomentState::Elementwise(v) => {
            for (vi, ai) in v.data_mut().iter_mut().zip(a.data()) {
                *vi = b2 * *vi + (1.0 - b2) * ai * ai;
            }
            let n = a.rows();
            let (m, v) = (&state.momentum, &*v);
            Matrix::from_fn(n, n, |i, j| {
                m.get(i, j) / bias1 / ((v.get(i, j) / bias2).sqrt() + config.eps)
            })
        }
    };
    cayley_retract(w, &direction.scale(-1.0), lr, config.cayley_iterations)
}

/// One Cayley-SGD step with heavy-ball momentum on the skew generator.
pub fn cayley_sgd_step(
    w: &OrthogonalMatrix,
    grad: &Matrix,
    state: &mut CayleyOptimizerState,
    config: &CayleyConfig,
) -> Result<OrthogonalMatrix> {
    check_grad(grad, w, state)?;
    let a = skew_project(grad, w)?;
    state.step_count += 1;
    state.momentum = state.momentum.scale(config.momentum).add(&a)?;
    let lr = config.lr_at(state.step_count);
    cayley_retract(w, &state.momentum.scale(-1.0), lr, config.cayley_iterations)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Owns one parameter's optimizer state.
#[derive(Clone, Debug)]
pub struct CayleyOptimizer {
    pub kind: OptimizerKind,
    pub config: CayleyConfig,
    pub state: CayleyOptimizerState,
}

impl CayleyOptimizer {
    pub fn new(kind: OptimizerKind, n: usize, config: CayleyConfig) -> Self {
        let state = CayleyOptimizerState::new(n, config.second_moment);
        Self {
            kind,
            config,
            state,
        }
    }

    pub fn step(&mut self, w: &OrthogonalMatrix, grad: &Matrix) -> Result<OrthogonalMatrix> {
        match self.kind {
            OptimizerKind::Adam => cayley_adam_step(w, grad, &mut self.state, &self.config),
            OptimizerKind::Sgd => cayley_sgd_step(w, grad, &mut self.state, &self.config),
        }
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::linalg::random_orthogonal;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn retraction_stays_orthogonal(n in 2usize..16, seed in any::<u64>(), step in -2.0f64..2.0) {
            let w = random_orthogonal(n, seed).unwrap();
            let g = Matrix::gaussian(n, n, &mut ChaCha8Rng::seed_from_u64(seed ^ 7));
            let a = skew_project(&g, &w).unwrap();
            prop_assert!(a.add(&a.transpose()).unwrap().max_abs() <= 1e-12 * a.max_abs().max(1.0));
            let next = cayley_retract(&w, &a, step, 3).unwrap();
            prop_assert!(next.defect() < 1e-10);
        }
    }
}
