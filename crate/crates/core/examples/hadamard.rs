//! Walsh-Hadamard rotations spread a single outlier channel over every
//! coordinate.
//!
//! cargo run --example hadamard

use kurtail::linalg::{fast_hadamard_transform, hadamard_matrix, randomized_hadamard, Matrix};
use kurtail::stats::kurtosis;

fn main() -> kurtail::Result<()> {
    let n = 64;
    let mut x: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
    x[3] = 40.0;

    let fast = fast_hadamard_transform(&x, true)?;
    let dense = hadamard_matrix(n)?.apply_rows(&Matrix::new(1, n, x.clone())?)?;
    let gap = fast.iter().zip(dense.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("fast vs dense transform: max |diff| = {gap:.1e}");

    let max = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let rh = randomized_hadamard(n, 7)?.apply_rows(&Matrix::new(1, n, x.clone())?)?;
    println!("{:<22}{:>10}{:>10}", "", "max |x|", "kurtosis");
    for (name, v) in [("input", &x[..]), ("hadamard", &fast[..]), ("randomized hadamard", rh.data())] {
        println!("{name:<22}{:>10.3}{:>10.2}", max(v), kurtosis(v)?.kappa);
    }
    Ok(())
}
