//! Seeded experiment sweeps over the RePS samplers.
//!
//! A sweep is described by an [`ExperimentConfig`] (a TOML file), expanded
//! into (method, NFE budget, seed) runs by [`run_experiment`] or into an
//! ODE-steps-per-restart ablation by [`ablate_ode_steps`], and written out by
//! [`emit_outputs`].

pub mod config;
pub mod error;
pub mod output;
pub mod rng;
pub mod run;

pub use config::{ExperimentConfig, Method, OUT_DIR_ENV};
pub use error::{HarnessError, Result};
pub use output::{emit_outputs, read_records, write_records, Figure};
pub use run::{ablate_ode_steps, run_experiment, RunRecord};
