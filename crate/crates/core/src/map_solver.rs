//! The per-step MAP problem
//!
//! ```text
//! x_MAP = argmin_x ½‖y − A(x)‖² + (λ/2)‖x − anchor‖²
//! ```
//!
//! where the anchor is the unconditional denoiser output `E[x₀ | x_σ]`. It is
//! solved by a fixed number of Adam steps for arbitrary differentiable `A`,
//! or in closed form when `A` is linear.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::error::{RepsError, Result};
use crate::measurements::{MeasurementModel, Observation};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub eta: f64,
    pub n_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Learning rate and step count with the usual moment defaults.
    pub fn new(eta: f64, n_steps: usize) -> Result<Self> {
        let cfg = Self { eta, n_steps, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(RepsError::InvalidConfig(format!("learning rate {} must be >= 0", self.eta)));
        }
        if self.n_steps == 0 {
            return Err(RepsError::InvalidConfig("Adam needs at least one step".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(RepsError::InvalidConfig(format!("{name} = {b} must lie in (0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(RepsError::InvalidConfig("eps must be positive".into()));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { eta: 1e-2, n_steps: 50, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One instance of the MAP problem.
#[derive(Debug, Clone)]
pub struct MapProblem<'a> {
    pub model: &'a MeasurementModel,
    pub observation: &'a Observation,
    pub anchor: Vector,
    pub lambda: f64,
}

impl<'a> MapProblem<'a> {
    pub fn new(
        model: &'a MeasurementModel,
        observation: &'a Observation,
        anchor: Vector,
        lambda: f64,
    ) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(RepsError::Domain(format!("lambda {lambda} must be >= 0")));
        }
        RepsError::check_dim("map anchor", model.input_dim(), anchor.len())?;
        RepsError::check_dim("map observation", model.output_dim(), observation.y.len())?;
        Ok(Self { model, observation, anchor, lambda })
    }

    /// Objective and gradient at `x`, sharing one forward evaluation.
    fn objective_and_gradient(&self, x: &Vector) -> Result<(f64, Vector)> {
        let residual = self.model.apply(x)? - &self.observation.y;
        let offset = x - &self.anchor;
        let value = 0.5 * residual.norm_squared() + 0.5 * self.lambda * offset.norm_squared();
        let mut grad = self.model.vjp(x, &residual)?;
        grad.axpy(self.lambda, &offset, 1.0);
        Ok((value, grad))
    }
}

/// `½‖y − A(x)‖² + (λ/2)‖x − anchor‖²`.
pub fn map_objective(p: &MapProblem<'_>, x: &Vector) -> Result<f64> {
    let residual = p.model.apply(x)? - &p.observation.y;
    Ok(0.5 * residual.norm_squared() + 0.5 * p.lambda * (x - &p.anchor).norm_squared())
}

/// `J_A(x)ᵀ (A(x) − y) + λ (x − anchor)`.
pub fn map_gradient(p: &MapProblem<'_>, x: &Vector) -> Result<Vector> {
    Ok(p.objective_and_gradient(x)?.1)
}

/// Exactly `cfg.n_steps` Adam iterations from `init`. Moments start at zero.
pub fn solve_map(p: &MapProblem<'_>, init: &Vector, cfg: &AdamConfig) -> Result<Vector> {
    cfg.validate()?;
    RepsError::check_dim("map init", p.anchor.len(), init.len())?;
    let d = init.len();
    let mut x = init.clone();
    let mut m = Vector::zeros(d);
    let mut v = Vector::zeros(d);
    let (mut b1t, mut b2t) = (1.0, 1.0);
    for step in 0..cfg.n_steps {
        let (value, grad) = p.objective_and_gradient(&x)?;
        if !value.is_finite() {
            return Err(RepsError::NonFinite(format!(
                "MAP objective is {value} at Adam step {step} (eta={})",
                cfg.eta
            )));
        }
        b1t *= cfg.beta1;
        b2t *= cfg.beta2;
        let (c1, c2) = (1.0 - b1t, 1.0 - b2t);
        for i in 0..d {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            x[i] -= cfg.eta * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(x)
}

/// `(AᵀA + λI)⁻¹ (Aᵀy + λ anchor)` for linear operators.
pub fn solve_map_linear_exact(p: &MapProblem<'_>) -> Result<Vector> {
    LinearMapSolver::new(p.model, p.observation, p.lambda)?.solve(&p.anchor)
}

/// Closed-form MAP solver with the normal-equation factorization cached, for
/// repeated solves that differ only in the anchor.
#[derive(Debug, Clone)]
pub struct LinearMapSolver {
    chol: Cholesky<f64, nalgebra::Dyn>,
    aty: Vector,
    lambda: f64,
}

impl LinearMapSolver {
    pub fn new(model: &MeasurementModel, observation: &Observation, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(RepsError::Domain(format!("lambda {lambda} must be >= 0")));
        }
        RepsError::check_dim("map observation", model.output_dim(), observation.y.len())?;
        let a = model.dense_matrix()?;
        Self::from_matrix(&a, &observation.y, lambda)
    }

    pub fn from_matrix(a: &Matrix, y: &Vector, lambda: f64) -> Result<Self> {
        let n = a.ncols();
        let normal = a.tr_mul(a) + Matrix::identity(n, n) * lambda;
        let chol = Cholesky::new(normal)
            .ok_or_else(|| RepsError::Singular(format!("AᵀA + {lambda}·I is not positive definite")))?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        if lo * lo <= 1e-12 * hi * hi {
            return Err(RepsError::Singular(format!(
                "AᵀA + {lambda}·I is numerically singular"
            )));
        }
        Ok(Self { chol, aty: a.tr_mul(y), lambda })
    }

    pub fn solve(&self, anchor: &Vector) -> Result<Vector> {
        RepsError::check_dim("map anchor", self.aty.len(), anchor.len())?;
        let mut rhs = self.aty.clone();
        rhs.axpy(self.lambda, anchor, 1.0);
        Ok(self.chol.solve(&rhs))
    }
}
