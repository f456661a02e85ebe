//! Dense numerics: row-major matrices, a reproducible RNG and a thin SVD.

mod matrix;
mod rng;
mod svd;

pub use matrix::{matmul, matmul_counted, Matrix};
pub use rng::Rng;
pub use svd::{
    frobenius_norm, spectral_norm, thin_svd, truncate_factors, SvdFactors, SVD_SWEEP_BUDGET,
    SVD_TOLERANCE,
};
