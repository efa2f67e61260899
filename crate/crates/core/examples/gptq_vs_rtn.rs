//! GPTQ against round-to-nearest on a layer with correlated inputs, scored by
//! the output error `tr(ΔWᵀ H ΔW)`.
//!
//! cargo run --example gptq_vs_rtn

use kurtail::gptq::{collect_hessian, gptq_quantize, proxy_loss};
use kurtail::linalg::{matmul, Matrix};
use kurtail::quant::{dequantize, rtn_quantize_weights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> kurtail::Result<()> {
    let (d_in, d_out, samples) = (64, 48, 2048);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // Inputs share a low-rank component so the Hessian is far from diagonal.
    let mix = Matrix::gaussian(8, d_in, &mut rng);
    let x = matmul(&Matrix::gaussian(samples, 8, &mut rng), &mix)?.add(&Matrix::gaussian(samples, d_in, &mut rng).scale(0.3))?;
    let w = Matrix::gaussian(d_in, d_out, &mut rng).scale(0.1);
    let h = collect_hessian(&x, 0.01)?;

    println!("{:<6}{:>14}{:>14}{:>8}", "bits", "rtn", "gptq", "ratio");
    for bits in [2, 3, 4, 8] {
        let rtn = proxy_loss(&w, &dequantize(&rtn_quantize_weights(&w, bits)?), &h.h)?;
        let gptq = proxy_loss(&w, &dequantize(&gptq_quantize(&w, &h, bits)?), &h.h)?;
        println!("{bits:<6}{rtn:>14.4e}{gptq:>14.4e}{:>8.3}", gptq / rtn);
    }
    Ok(())
}
