//! Kurtosis-driven rotation learning for 4-bit weight, activation and
//! KV-cache quantization of decoder transformers.
//!
//! Activations entering each block are captured from a model, an orthogonal
//! rotation is learned on the Stiefel manifold so that their kurtosis
//! approaches that of a uniform distribution, and the rotation is fused into
//! the weights. Outlier-free activations then quantize with less error.
//!
//! - [`linalg`]: dense matrices, QR, Hadamard transforms, Cholesky.
//! - [`stats`]: kurtosis and its gradient.
//! - [`quant`]: uniform quantizers and step-size sensitivity.
//! - [`manifold`]: Cayley SGD and Adam on orthogonal matrices.
//! - [`rotor`]: activation sets and rotation training.
//! - [`toyformer`]: a small decoder with rotation fusion and simulated quantization.
//! - [`gptq`]: Hessian-aware weight quantization.
//! - [`pipeline`]: activation files, layer-wise capture and end-to-end runs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gptq;
pub mod linalg;
pub mod manifold;
pub mod pipeline;
pub mod quant;
pub mod rotor;
pub mod stats;
pub mod toyformer;

pub use error::{KurtailError, Result};
