//! Quantization sensitivity: MSE at a scaled step size relative to the
//! optimal step. Light-tailed inputs pay less for a mis-set scale.
//!
//! cargo run --example sensitivity

use kurtail::quant::sensitivity;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT, Uniform};

fn main() -> kurtail::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 50_000;
    let uniform: Vec<f64> = Uniform::new(-1.0, 1.0).unwrap().sample_iter(&mut rng).take(n).collect();
    let normal: Vec<f64> = Normal::new(0.0, 1.0).unwrap().sample_iter(&mut rng).take(n).collect();
    let heavy: Vec<f64> = StudentT::new(5.0).unwrap().sample_iter(&mut rng).take(n).collect();
    let alphas = [0.6, 0.8, 0.9, 1.0, 1.1, 1.2, 1.4];

    print!("{:<11}", "alpha");
    for a in alphas {
        print!("{a:>9.1}");
    }
    println!();
    for (name, x) in [("uniform", &uniform), ("normal", &normal), ("student-t", &heavy)] {
        let report = sensitivity(x, 4, &alphas)?;
        print!("{name:<11}");
        for g in &report.gamma {
            print!("{g:>9.4}");
        }
        println!("   (s* = {:.4})", report.optimal_step);
    }
    Ok(())
}
