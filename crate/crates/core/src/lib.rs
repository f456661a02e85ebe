//! Increment-calibrated caching for diffusion transformers.
//!
//! A small, deterministic diffusion-transformer engine in which the output of
//! every linear layer can be cached on one denoising step and reused on later
//! steps, either verbatim ("naive" caching) or corrected by a low-rank
//! increment `Wa·Wb·(x_now − x_cached)` whose factors come from a truncated
//! SVD of the layer's own weight matrix (optionally channel-scaled).
//!
//! Layout:
//! - [`tensor`]: dense matrices, seeded RNG, one-sided Jacobi SVD.
//! - [`model`]: toy DiT noise predictor with per-linear-layer dispatch.
//! - [`sampler`]: noise schedules, forward noising, DDPM/DDIM updates.
//! - [`cache`]: gather/scatter plans, layer cache, execution modes.
//! - [`calibration`]: plain / channel-activation-aware / channel-delta-aware SVD.
//! - [`ledger`]: exact multiply-accumulate accounting.
//! - [`harness`]: MAC cost model, weight container, configs, reports, sweeps.

pub mod cache;
pub mod calibration;
pub mod error;
pub mod harness;
pub mod ledger;
pub mod model;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Rng, SvdFactors};
