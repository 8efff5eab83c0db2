//! Restart posterior sampling (RePS) for linear and nonlinear inverse problems
//! under variance-exploding diffusion priors.
//!
//! The priors in this crate are analytic (Gaussian and Gaussian-mixture), so the
//! score and the Tweedie denoiser are exact at every noise level. That lets every
//! sampler be checked against closed-form or brute-force posterior oracles.
//!
//! The pieces, bottom-up:
//!
//! - [`schedules`]: the σ(t) = t schedule and polynomial step grids.
//! - [`priors`]: score models exposing `∇ log p_σ` and `E[x₀ | x_σ]`.
//! - [`measurements`]: forward operators `A(·)` with exact vector-Jacobian products.
//! - [`map_solver`]: the per-step MAP problem, solved by Adam or in closed form.
//! - [`samplers`]: conditioned ODE/SDE integrators and the restart driver.
//! - [`oracles`]: exact Gaussian-linear and grid posteriors.
//! - [`metrics`]: PSNR, SSIM and friends.

pub mod error;
pub mod map_solver;
pub mod measurements;
pub mod metrics;
pub mod oracles;
pub mod priors;
pub mod samplers;
pub mod schedules;

pub use error::{RepsError, Result};

/// State and measurement vectors.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrices (test-scale linear algebra only).
pub type Matrix = nalgebra::DMatrix<f64>;
