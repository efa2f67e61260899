//! Cayley Adam on the orthogonal group: recover a hidden rotation from
//! noisy pairs `Y = X·Q + E` by minimizing `‖X·W − Y‖²`.
//!
//! cargo run --example cayley_procrustes

use kurtail::linalg::{determinant, matmul, matmul_tn, random_orthogonal, Matrix, OrthogonalMatrix};
use kurtail::manifold::{CayleyConfig, CayleyOptimizer, OptimizerKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> kurtail::Result<()> {
    let (n, samples) = (16, 400);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // The Cayley map stays in SO(n), so the target must have det +1.
    let mut q = random_orthogonal(n, 9)?.into_matrix();
    if determinant(&q)? < 0.0 {
        q.row_mut(0).iter_mut().for_each(|v| *v = -*v);
    }
    let q = OrthogonalMatrix::certify(q)?;
    let x = Matrix::gaussian(samples, n, &mut rng);
    let y = q.apply_rows(&x)?.add(&Matrix::gaussian(samples, n, &mut rng).scale(0.01))?;

    let config = CayleyConfig {
        lr: 0.1,
        total_steps: Some(300),
        ..CayleyConfig::default()
    };
    let mut opt = CayleyOptimizer::new(OptimizerKind::Adam, n, config);
    let mut w = OrthogonalMatrix::identity(n);
    for step in 0..=300 {
        let residual = matmul(&x, w.matrix())?.sub(&y)?;
        if step % 50 == 0 {
            println!(
                "step {step:>3}  loss/sample {:>10.5}  ‖W − Q‖ {:>8.5}  defect {:.1e}",
                residual.frobenius_norm().powi(2) / samples as f64,
                w.matrix().sub(q.matrix())?.frobenius_norm(),
                w.defect()
            );
        }
        let grad = matmul_tn(&x, &residual)?.scale(2.0 / samples as f64);
        w = opt.step(&w, &grad)?;
    }
    Ok(())
}
