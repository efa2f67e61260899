//! Sample kurtosis of common distributions and its analytic gradient.
//!
//! cargo run --example kurtosis

use kurtail::stats::{kurtosis, kurtosis_with_gradient};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal, StudentT, Uniform};

fn sample<D: Distribution<f64>>(d: D, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    d.sample_iter(&mut rng).take(n).collect()
}

fn laplace(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let e: f64 = Exp1.sample(&mut rng);
            if rng.random::<bool>() { e } else { -e }
        })
        .collect()
}

fn main() -> kurtail::Result<()> {
    let n = 200_000;
    let rows = [
        ("uniform", sample(Uniform::new(-1.0, 1.0).unwrap(), n, 1), 1.8),
        ("normal", sample(Normal::new(0.0, 1.0).unwrap(), n, 2), 3.0),
        ("laplace", laplace(n, 3), 6.0),
        ("student-t (10)", sample(StudentT::new(10.0).unwrap(), n, 4), 4.0),
    ];
    println!("{:<16}{:>10}{:>10}", "distribution", "sample", "exact");
    for (name, x, exact) in &rows {
        println!("{name:<16}{:>10.3}{exact:>10.3}", kurtosis(x)?.kappa);
    }

    // Central differences against the analytic gradient on a short vector.
    let x = sample(Normal::new(0.0, 1.0).unwrap(), 12, 5);
    let (_, grad) = kurtosis_with_gradient(&x)?;
    let h = 1e-6;
    let worst = (0..x.len())
        .map(|i| {
            let (mut up, mut down) = (x.clone(), x.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (kurtosis(&up).unwrap().kappa - kurtosis(&down).unwrap().kappa) / (2.0 * h);
            (fd - grad[i]).abs()
        })
        .fold(0.0, f64::max);
    println!("gradient vs finite differences: max |diff| = {worst:.1e}");
    Ok(())
}
