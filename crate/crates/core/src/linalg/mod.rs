//! Dense matrices, orthogonal-matrix construction and Hadamard transforms.
//!
//! Everything is `f64`. Rotations act on row vectors: a token matrix `X`
//! (tokens × channels) is rotated as `X · Q`.

mod hadamard;
mod matrix;
mod orthogonal;

pub use hadamard::{
    fast_hadamard_transform, fwht_in_place, hadamard_matrix, randomized_hadamard,
    RandomizedHadamard,
};
pub use matrix::{cholesky, determinant, matmul, matmul_tn, solve, spd_inverse, Matrix};
pub use orthogonal::{
    orthogonality_defect, qr_orthogonalize, random_orthogonal, MatrixRecord, OrthogonalMatrix,
    DEFAULT_ORTHO_TOL,
};
