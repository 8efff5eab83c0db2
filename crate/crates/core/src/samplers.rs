//! Reverse-time integrators and the restart driver.
//!
//! With σ(t) = t, one Euler step of the probability-flow ODE from `σ_from` to
//! `σ_to` reads
//!
//! ```text
//! x ← x + ((σ_from − σ_to) / σ_from) · (D(x, σ_from) − x)
//! ```
//!
//! where `D` is the unconditional denoiser. Conditioning replaces `D` with the
//! MAP estimate anchored at `D`. The Euler–Maruyama discretization of the
//! reverse SDE doubles the drift and adds `√(2 σ_from (σ_from − σ_to)) z`.
//!
//! The restart sampler runs one conditioned-ODE leg from `σ_max` down to `σ_0`,
//! then repeatedly re-noises the result to an annealed level `σ_r` and runs
//! another leg back to `σ_0`.
//!
//! NFE counts denoiser evaluations only; measurement-operator work is tallied
//! separately as `(apply, vjp)` pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RepsError, Result};
use crate::map_solver::{solve_map, AdamConfig, LinearMapSolver, MapProblem};
use crate::measurements::{MeasurementModel, Observation};
use crate::priors::{standard_normal, ScoreModel};
use crate::schedules::{ode_grid, restart_grid, StepGrid, RHO_ODE, RHO_RESTART};
use crate::Vector;

/// How each per-step MAP problem is solved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MapMethod {
    Adam(AdamConfig),
    /// Closed form; linear operators only.
    ExactLinear,
}

impl Default for MapMethod {
    fn default() -> Self {
        MapMethod::Adam(AdamConfig::default())
    }
}

/// Starting point of each Adam solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapInit {
    /// The denoiser output `E[x₀ | x_σ]`.
    #[default]
    Anchor,
    /// The MAP estimate of the previous integration step (anchor on the first).
    PreviousMap,
}

/// Where each leg's grid ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    /// Stop at `σ_0`.
    #[default]
    SigmaZero,
    /// Replace the last level with 0; the final step returns the MAP estimate.
    Zero,
}

/// Measurement conditioning for one observation: turns a denoiser output
/// into `E[x₀ | x_σ, y]` via the MAP problem.
#[derive(Debug, Clone)]
pub struct Conditioner<'a> {
    model: &'a MeasurementModel,
    observation: &'a Observation,
    lambda: f64,
    method: MapMethod,
    init: MapInit,
    linear: Option<LinearMapSolver>,
}

impl<'a> Conditioner<'a> {
    pub fn new(
        model: &'a MeasurementModel,
        observation: &'a Observation,
        lambda: f64,
        method: MapMethod,
    ) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(RepsError::Domain(format!("lambda {lambda} must be >= 0")));
        }
        RepsError::check_dim("observation", model.output_dim(), observation.y.len())?;
        let linear = match method {
            MapMethod::Adam(cfg) => {
                cfg.validate()?;
                None
            }
            MapMethod::ExactLinear => Some(LinearMapSolver::new(model, observation, lambda)?),
        };
        Ok(Self { model, observation, lambda, method, init: MapInit::default(), linear })
    }

    pub fn with_init(mut self, init: MapInit) -> Self {
        self.init = init;
        self
    }

    pub fn model(&self) -> &MeasurementModel {
        self.model
    }

    pub fn observation(&self) -> &Observation {
        self.observation
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn method(&self) -> MapMethod {
        self.method
    }

    pub fn dim(&self) -> usize {
        self.model.input_dim()
    }

    /// Solves the MAP problem anchored at `anchor`. Returns the estimate and the
    /// number of `(apply, vjp)` pairs spent.
    pub fn solve(&self, anchor: &Vector, previous: Option<&Vector>) -> Result<(Vector, u64)> {
        match (&self.method, &self.linear) {
            (_, Some(linear)) => Ok((linear.solve(anchor)?, 0)),
            (MapMethod::Adam(cfg), None) => {
                let init = match (self.init, previous) {
                    (MapInit::PreviousMap, Some(prev)) => prev,
                    _ => anchor,
                };
                let p = MapProblem::new(self.model, self.observation, anchor.clone(), self.lambda)?;
                Ok((solve_map(&p, init, cfg)?, cfg.n_steps as u64))
            }
            (MapMethod::ExactLinear, None) => unreachable!("exact solver is built in the constructor"),
        }
    }
}

fn check_step(sigma_from: f64, sigma_to: f64) -> Result<()> {
    if !(sigma_from > 0.0) || !(sigma_to >= 0.0) || sigma_to > sigma_from || !sigma_from.is_finite() {
        return Err(RepsError::Domain(format!(
            "invalid step {sigma_from} -> {sigma_to}: need sigma_from > 0 and 0 <= sigma_to <= sigma_from"
        )));
    }
    Ok(())
}

/// `x + c (target − x)` with `c = (σ_from − σ_to) / σ_from`.
fn euler_update(x: &Vector, target: &Vector, sigma_from: f64, sigma_to: f64, scale: f64) -> Vector {
    let c = scale * (sigma_from - sigma_to) / sigma_from;
    let mut out = x.clone();
    out.axpy(c, &(target - x), 1.0);
    out
}

/// One Euler step of the unconditional probability-flow ODE. One denoiser call.
pub fn uncond_ode_step<P: ScoreModel + ?Sized>(
    prior: &P,
    x: &Vector,
    sigma_from: f64,
    sigma_to: f64,
) -> Result<Vector> {
    check_step(sigma_from, sigma_to)?;
    let denoised = prior.denoise_at(x, sigma_from);
    Ok(euler_update(x, &denoised, sigma_from, sigma_to, 1.0))
}

/// Result of one conditioned step.
#[derive(Debug, Clone, PartialEq)]
pub struct CondStep {
    pub x: Vector,
    /// The MAP estimate of `E[x₀ | x_σ, y]` used for the step.
    pub x0_map: Vector,
    pub measurement_evals: u64,
}

fn conditioned_target<P: ScoreModel + ?Sized>(
    prior: &P,
    cond: &Conditioner<'_>,
    x: &Vector,
    sigma_from: f64,
    previous: Option<&Vector>,
) -> Result<(Vector, u64)> {
    RepsError::check_dim("sampler state", cond.dim(), x.len())?;
    let anchor = prior.denoise_at(x, sigma_from);
    cond.solve(&anchor, previous)
}

/// One Euler step of the measurement-conditioned ODE.
pub fn cond_ode_step<P: ScoreModel + ?Sized>(
    prior: &P,
    cond: &Conditioner<'_>,
    x: &Vector,
    sigma_from: f64,
    sigma_to: f64,
) -> Result<CondStep> {
    cond_ode_step_from(prior, cond, x, sigma_from, sigma_to, None)
}

fn cond_ode_step_from<P: ScoreModel + ?Sized>(
    prior: &P,
    cond: &Conditioner<'_>,
    x: &Vector,
    sigma_from: f64,
    sigma_to: f64,
    previous: Option<&Vector>,
) -> Result<CondStep> {
    check_step(sigma_from, sigma_to)?;
    let (x0_map, measurement_evals) = conditioned_target(prior, cond, x, sigma_from, previous)?;
    let x = euler_update(x, &x0_map, sigma_from, sigma_to, 1.0);
    Ok(CondStep { x, x0_map, measurement_evals })
}

/// One Euler–Maruyama step of the measurement-conditioned reverse SDE.
pub fn cond_sde_step<P: ScoreModel + ?Sized, R: Rng + ?Sized>(
    prior: &P,
    cond: &Conditioner<'_>,
    x: &Vector,
    sigma_from: f64,
    sigma_to: f64,
    rng: &mut R,
) -> Result<CondStep> {
    cond_sde_step_from(prior, cond, x, sigma_from, sigma_to, None, rng)
}

fn cond_sde_step_from<P: ScoreModel + ?Sized, R: Rng + ?Sized>(
    prior: &P,
    cond: &Conditioner<'_>,
    x: &Vector,
    sigma_from: f64,
    sigma_to: f64,
    previous: Option<&Vector>,
    rng: &mut R,
) -> Result<CondStep> {
    check_step(sigma_from, sigma_to)?;
    let (x0_map, measurement_evals) = conditioned_target(prior, cond, x, sigma_from, previous)?;
    let mut next = euler_update(x, &x0_map, sigma_from, sigma_to, 2.0);
    let noise_std = (2.0 * sigma_from * (sigma_from - sigma_to)).sqrt();
    if noise_std > 0.0 {
        next.axpy(noise_std, &standard_normal(rng, x.len()), 1.0);
    }
    Ok(CondStep { x: next, x0_map, measurement_evals })
}

/// Forward-diffuses a clean estimate to level `sigma_r`: `x₀ + σ_r z`.
pub fn restart<R: Rng + ?Sized>(x0: &Vector, sigma_r: f64, rng: &mut R) -> Result<Vector> {
    if !(sigma_r >= 0.0) || !sigma_r.is_finite() {
        return Err(RepsError::Domain(format!("restart level {sigma_r} must be >= 0")));
    }
    if sigma_r == 0.0 {
        return Ok(x0.clone());
    }
    let mut x = x0.clone();
    x.axpy(sigma_r, &standard_normal(rng, x0.len()), 1.0);
    Ok(x)
}

/// Everything the restart sampler needs besides the prior and the observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepsConfig {
    pub ode_steps_per_leg: usize,
    pub n_restarts: usize,
    pub sigma_restart: f64,
    pub sigma_min_restart: f64,
    pub rho_ode: f64,
    pub rho_restart: f64,
    pub sigma_max: f64,
    pub sigma_zero: f64,
    /// Weight of the proximity term, `σ_n² / γ²`.
    pub lambda: f64,
    pub map: MapMethod,
    pub map_init: MapInit,
    pub terminal: Terminal,
    /// Whether the initial leg from `σ_max` is paid for out of an NFE budget
    /// (see [`RepsConfig::restarts_for_budget`]).
    pub include_initial_leg_in_budget: bool,
    /// Record every step instead of only leg boundaries.
    pub record_every_step: bool,
}

impl Default for RepsConfig {
    fn default() -> Self {
        Self {
            ode_steps_per_leg: 10,
            n_restarts: 100,
            sigma_restart: 10.0,
            sigma_min_restart: 0.1,
            rho_ode: RHO_ODE,
            rho_restart: RHO_RESTART,
            sigma_max: 100.0,
            sigma_zero: 0.01,
            lambda: 1.0,
            map: MapMethod::default(),
            map_init: MapInit::default(),
            terminal: Terminal::default(),
            include_initial_leg_in_budget: false,
            record_every_step: false,
        }
    }
}

impl RepsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RepsError::InvalidConfig(msg));
        if self.ode_steps_per_leg == 0 {
            return bad("ode_steps_per_leg must be >= 1".into());
        }
        if !(self.sigma_zero > 0.0) || !(self.sigma_max > self.sigma_zero) {
            return bad(format!(
                "need 0 < sigma_zero < sigma_max (got {} and {})",
                self.sigma_zero, self.sigma_max
            ));
        }
        if self.n_restarts > 0 {
            if !(self.sigma_min_restart > 0.0) || self.sigma_restart < self.sigma_min_restart {
                return bad(format!(
                    "need 0 < sigma_min_restart <= sigma_restart (got {} and {})",
                    self.sigma_min_restart, self.sigma_restart
                ));
            }
            if !(self.rho_restart >= 1.0) {
                return bad("rho_restart must be >= 1".into());
            }
        }
        if !(self.rho_ode >= 1.0) {
            return bad("rho_ode must be >= 1".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        if let MapMethod::Adam(cfg) = &self.map {
            cfg.validate()?;
        }
        Ok(())
    }

    /// Number of restarts that fits an NFE budget with this leg length.
    ///
    /// Every leg costs `ode_steps_per_leg` denoiser calls. When the initial leg
    /// counts against the budget, `budget / steps − 1` restarts fit; otherwise
    /// `budget / steps`, and the run reports `budget + steps` NFE.
    pub fn restarts_for_budget(&self, budget: usize) -> Result<usize> {
        let steps = self.ode_steps_per_leg;
        if steps == 0 || !budget.is_multiple_of(steps) || budget < steps {
            return Err(RepsError::InvalidConfig(format!(
                "NFE budget {budget} is not a positive multiple of {steps} steps per leg"
            )));
        }
        let legs = budget / steps;
        Ok(if self.include_initial_leg_in_budget { legs - 1 } else { legs })
    }

    /// Denoiser evaluations for one run with the current settings.
    pub fn nfe(&self) -> u64 {
        ((self.n_restarts + 1) * self.ode_steps_per_leg) as u64
    }

    fn leg_grid(&self, sigma_start: f64) -> Result<StepGrid> {
        let grid = ode_grid(sigma_start, self.sigma_zero, self.ode_steps_per_leg, self.rho_ode)?;
        Ok(match self.terminal {
            Terminal::SigmaZero => grid,
            Terminal::Zero => grid.with_terminal_zero(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotKind {
    /// State at the end of an integration leg.
    LegEnd,
    /// State right after a restart perturbation.
    Restart,
    /// State after an individual integration step (verbose runs only).
    Step,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub kind: SnapshotKind,
    pub leg: usize,
    pub sigma: f64,
    pub x: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub x: Vector,
    pub snapshots: Vec<Snapshot>,
    pub nfe_denoiser: u64,
    pub nfe_measurement: u64,
}

/// Mutable state of one sampling chain.
#[derive(Debug, Clone)]
pub struct SamplerState<R> {
    pub x: Vector,
    pub sigma: f64,
    pub nfe_denoiser: u64,
    pub nfe_measurement: u64,
    pub rng: R,
    previous_map: Option<Vector>,
}

impl<R: Rng> SamplerState<R> {
    /// Draws `x ~ N(0, σ² I)`.
    pub fn from_noise(dim: usize, sigma: f64, mut rng: R) -> Self {
        let x = standard_normal(&mut rng, dim) * sigma;
        Self::at(x, sigma, rng)
    }

    pub fn at(x: Vector, sigma: f64, rng: R) -> Self {
        Self { x, sigma, nfe_denoiser: 0, nfe_measurement: 0, rng, previous_map: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Ode,
    Sde,
}

/// Runs one leg over `grid`, starting from the state's current `x`.
pub fn run_leg<P: ScoreModel + ?Sized, R: Rng>(
    prior: &P,
    cond: &Conditioner<'_>,
    state: &mut SamplerState<R>,
    grid: &StepGrid,
    integrator: Integrator,
    leg: usize,
    snapshots: Option<&mut Vec<Snapshot>>,
) -> Result<()> {
    let mut snapshots = snapshots;
    for (from, to) in grid.steps() {
        let prev = state.previous_map.as_ref();
        let step = match integrator {
            Integrator::Ode => cond_ode_step_from(prior, cond, &state.x, from, to, prev)?,
            Integrator::Sde => cond_sde_step_from(prior, cond, &state.x, from, to, prev, &mut state.rng)?,
        };
        state.nfe_denoiser += 1;
        state.nfe_measurement += step.measurement_evals;
        state.x = step.x;
        state.sigma = to;
        state.previous_map = Some(step.x0_map);
        if let Some(s) = snapshots.as_deref_mut() {
            s.push(Snapshot { kind: SnapshotKind::Step, leg, sigma: to, x: state.x.clone() });
        }
    }
    Ok(())
}

fn single_pass<P: ScoreModel + ?Sized, R: Rng>(
    prior: &P,
    cond: &Conditioner<'_>,
    grid: &StepGrid,
    integrator: Integrator,
    record_every_step: bool,
    rng: R,
) -> Result<RunResult> {
    if grid.n_steps() == 0 || grid.first() <= 0.0 {
        return Err(RepsError::InvalidConfig("sampling grid needs a positive start and >= 1 step".into()));
    }
    let mut state = SamplerState::from_noise(cond.dim(), grid.first(), rng);
    let mut snapshots = Vec::new();
    run_leg(prior, cond, &mut state, grid, integrator, 0, record_every_step.then_some(&mut snapshots))?;
    snapshots.push(Snapshot { kind: SnapshotKind::LegEnd, leg: 0, sigma: state.sigma, x: state.x.clone() });
    Ok(RunResult {
        x: state.x,
        snapshots,
        nfe_denoiser: state.nfe_denoiser,
        nfe_measurement: state.nfe_measurement,
    })
}

/// Conditioned ODE from `x_T ~ N(0, grid.first()² I)` over `grid`, no restarts.
pub fn cond_ode_sample<P: ScoreModel + ?Sized, R: Rng>(
    prior: &P,
    cond: &Conditioner<'_>,
    grid: &StepGrid,
    rng: R,
) -> Result<RunResult> {
    single_pass(prior, cond, grid, Integrator::Ode, false, rng)
}

/// Conditioned Euler–Maruyama SDE over `grid`.
pub fn cond_sde_sample<P: ScoreModel + ?Sized, R: Rng>(
    prior: &P,
    cond: &Conditioner<'_>,
    grid: &StepGrid,
    rng: R,
) -> Result<RunResult> {
    single_pass(prior, cond, grid, Integrator::Sde, false, rng)
}

/// Restart posterior sampling.
///
/// One conditioned-ODE leg from `σ_max` to `σ_0`, then for each restart level
/// `σ_r` (annealed from `sigma_restart` down to `sigma_min_restart`) a jump
/// `x ← x + σ_r z` followed by a fresh leg from `σ_r` to `σ_0`.
pub fn reps_sample<P: ScoreModel + ?Sized, R: Rng>(
    prior: &P,
    cond: &Conditioner<'_>,
    cfg: &RepsConfig,
    rng: R,
) -> Result<RunResult> {
    cfg.validate()?;
    let verbose = cfg.record_every_step;
    let mut state = SamplerState::from_noise(cond.dim(), cfg.sigma_max, rng);
    let mut snapshots = Vec::new();

    let grid = cfg.leg_grid(cfg.sigma_max)?;
    run_leg(prior, cond, &mut state, &grid, Integrator::Ode, 0, verbose.then_some(&mut snapshots))?;
    snapshots.push(Snapshot { kind: SnapshotKind::LegEnd, leg: 0, sigma: state.sigma, x: state.x.clone() });

    if cfg.n_restarts > 0 {
        let levels = restart_grid(cfg.sigma_restart, cfg.sigma_min_restart, cfg.n_restarts, cfg.rho_restart)?;
        for (k, &sigma_r) in levels.levels().iter().enumerate() {
            let leg = k + 1;
            state.x = restart(&state.x, sigma_r, &mut state.rng)?;
            state.sigma = sigma_r;
            if verbose {
                snapshots.push(Snapshot { kind: SnapshotKind::Restart, leg, sigma: sigma_r, x: state.x.clone() });
            }
            let grid = cfg.leg_grid(sigma_r)?;
            run_leg(prior, cond, &mut state, &grid, Integrator::Ode, leg, verbose.then_some(&mut snapshots))?;
            snapshots.push(Snapshot { kind: SnapshotKind::LegEnd, leg, sigma: state.sigma, x: state.x.clone() });
        }
    }

    Ok(RunResult {
        x: state.x,
        snapshots,
        nfe_denoiser: state.nfe_denoiser,
        nfe_measurement: state.nfe_measurement,
    })
}

/// Unconditional probability-flow ODE from `x_T ~ N(0, grid.first()² I)`.
pub fn uncond_ode_sample<P: ScoreModel + ?Sized, R: Rng>(prior: &P, grid: &StepGrid, mut rng: R) -> Result<Vector> {
    let mut x = standard_normal(&mut rng, prior.dim()) * grid.first();
    for (from, to) in grid.steps() {
        x = uncond_ode_step(prior, &x, from, to)?;
    }
    Ok(x)
}
