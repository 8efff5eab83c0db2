//! Noise schedules and polynomial step grids.
//!
//! The forward process uses σ(t) = t, so time and noise level coincide and
//! every integrator works directly in σ. Discretizations interpolate
//! `σ^(1/ρ)` linearly between two levels and raise the result back to `ρ`;
//! larger `ρ` packs more levels near the low-noise end.

use crate::error::{RepsError, Result};

/// Default exponent for conditioned-ODE grids.
pub const RHO_ODE: f64 = 7.0;
/// Default exponent for the restart annealing grid.
pub const RHO_RESTART: f64 = 15.0;

/// The identity noise schedule σ(t) = t on `[sigma_zero, sigma_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    sigma_max: f64,
    sigma_zero: f64,
}

impl NoiseSchedule {
    pub fn new(sigma_max: f64, sigma_zero: f64) -> Result<Self> {
        if !(sigma_zero > 0.0 && sigma_zero.is_finite() && sigma_max.is_finite()) {
            return Err(RepsError::Domain(format!(
                "noise levels must be positive and finite (sigma_max={sigma_max}, sigma_zero={sigma_zero})"
            )));
        }
        if sigma_zero >= sigma_max {
            return Err(RepsError::Domain(format!(
                "sigma_zero ({sigma_zero}) must be below sigma_max ({sigma_max})"
            )));
        }
        Ok(Self { sigma_max, sigma_zero })
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn sigma_zero(&self) -> f64 {
        self.sigma_zero
    }

    /// σ(t) = t.
    #[inline]
    pub fn sigma(&self, t: f64) -> f64 {
        t
    }

    /// dσ/dt, identically one.
    #[inline]
    pub fn sigma_dot(&self, _t: f64) -> f64 {
        1.0
    }

    /// ODE grid across the full schedule range.
    pub fn ode_grid(&self, n_steps: usize, rho: f64) -> Result<StepGrid> {
        ode_grid(self.sigma_max, self.sigma_zero, n_steps, rho)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { sigma_max: 100.0, sigma_zero: 0.01 }
    }
}

fn check_levels(sigma_start: f64, sigma_end: f64, rho: f64) -> Result<()> {
    if !(sigma_start > 0.0 && sigma_end > 0.0) || !sigma_start.is_finite() || !sigma_end.is_finite() {
        return Err(RepsError::Domain(format!(
            "noise levels must be positive and finite (start={sigma_start}, end={sigma_end})"
        )));
    }
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(RepsError::Domain(format!("rho must be >= 1, got {rho}")));
    }
    Ok(())
}

/// Polynomial interpolation between two noise levels at `s ∈ [0, 1]`.
///
/// Returns `(σ_start^(1/ρ) + s (σ_end^(1/ρ) − σ_start^(1/ρ)))^ρ`. The endpoints
/// are returned exactly, as is a constant schedule.
pub fn polynomial_level(s: f64, sigma_start: f64, sigma_end: f64, rho: f64) -> Result<f64> {
    check_levels(sigma_start, sigma_end, rho)?;
    if !(0.0..=1.0).contains(&s) {
        return Err(RepsError::Domain(format!("interpolation parameter {s} outside [0, 1]")));
    }
    Ok(level_unchecked(s, sigma_start, sigma_end, rho))
}

fn level_unchecked(s: f64, sigma_start: f64, sigma_end: f64, rho: f64) -> f64 {
    if s == 0.0 || sigma_start == sigma_end {
        return sigma_start;
    }
    if s == 1.0 {
        return sigma_end;
    }
    let inv = rho.recip();
    let a = sigma_start.powf(inv);
    let b = sigma_end.powf(inv);
    (a + s * (b - a)).powf(rho)
}

/// An ordered, non-increasing list of noise levels.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrid {
    levels: Vec<f64>,
    rho: f64,
}

impl StepGrid {
    /// Builds a grid from explicit levels. Levels must be finite, non-negative
    /// and non-increasing.
    pub fn from_levels(levels: Vec<f64>, rho: f64) -> Result<Self> {
        if levels.is_empty() {
            return Err(RepsError::Domain("step grid needs at least one level".into()));
        }
        if levels.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(RepsError::Domain("grid levels must be finite and non-negative".into()));
        }
        if levels.windows(2).any(|w| w[1] > w[0]) {
            return Err(RepsError::Domain("grid levels must be non-increasing".into()));
        }
        Ok(Self { levels, rho })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.levels[0]
    }

    pub fn last(&self) -> f64 {
        self.levels[self.levels.len() - 1]
    }

    /// Number of integration steps, i.e. consecutive level pairs.
    pub fn n_steps(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }

    /// Consecutive `(σ_from, σ_to)` pairs.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.levels.windows(2).map(|w| (w[0], w[1]))
    }

    /// Replaces the final level with zero so the last Euler step lands on a
    /// fully denoised estimate.
    pub fn with_terminal_zero(mut self) -> Self {
        if let Some(last) = self.levels.last_mut() {
            *last = 0.0;
        }
        self
    }
}

/// `n_steps + 1` levels from `sigma_start` to `sigma_end` at `s = k / n_steps`.
pub fn ode_grid(sigma_start: f64, sigma_end: f64, n_steps: usize, rho: f64) -> Result<StepGrid> {
    check_levels(sigma_start, sigma_end, rho)?;
    if n_steps == 0 {
        return Err(RepsError::Domain("ODE grid needs at least one step".into()));
    }
    let levels = (0..=n_steps)
        .map(|k| level_unchecked(k as f64 / n_steps as f64, sigma_start, sigma_end, rho))
        .collect();
    Ok(StepGrid { levels, rho })
}

/// `n_restarts` restart levels annealed from `sigma_restart` down to `sigma_min`.
///
/// Restarts are indexed `0..n_restarts` in descending order. A single restart
/// uses `sigma_restart`.
pub fn restart_grid(sigma_restart: f64, sigma_min: f64, n_restarts: usize, rho: f64) -> Result<StepGrid> {
    check_levels(sigma_restart, sigma_min, rho)?;
    if n_restarts == 0 {
        return Err(RepsError::Domain("restart grid needs at least one level".into()));
    }
    if sigma_restart < sigma_min {
        return Err(RepsError::Domain(format!(
            "sigma_restart ({sigma_restart}) must be at least sigma_min ({sigma_min})"
        )));
    }
    let levels = if n_restarts == 1 {
        vec![sigma_restart]
    } else {
        let denom = (n_restarts - 1) as f64;
        (0..n_restarts)
            .map(|k| level_unchecked(k as f64 / denom, sigma_restart, sigma_min, rho))
            .collect()
    };
    Ok(StepGrid { levels, rho })
}
