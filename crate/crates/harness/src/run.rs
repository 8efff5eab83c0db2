use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use reps_core::measurements::{make_task, MeasurementModel, Observation, SignalShape};
use reps_core::metrics::{MetricReport, SsimParams};
use reps_core::oracles::{gaussian_linear_posterior, grid_posterior, GaussianPosterior, GridOracle, GridSpec, PosteriorOracle};
use reps_core::priors::{GmmPrior, PerturbedScore, ScoreModel};
use reps_core::samplers::{cond_ode_sample, cond_sde_sample, reps_sample, Conditioner, RepsConfig, Terminal};
use reps_core::schedules::{ode_grid, StepGrid};
use reps_core::Vector;

use crate::config::{ExperimentConfig, Method};
use crate::error::{HarnessError, Result};
use crate::rng::{chain_rng, keyed_rng, PROBLEM_STREAM};

/// One (method, budget, seed) cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    pub task: String,
    /// Denoiser evaluations per chain.
    pub nfe: u64,
    pub seed: u64,
    /// ODE steps between restarts; RePS runs only.
    pub ode_steps: Option<usize>,
    pub metrics: MetricReport,
    pub wall_s: Option<f64>,
    /// Set when the run failed; metrics are then empty.
    pub error: Option<String>,
    pub config_hash: String,
}

/// Reference posterior for a seed's observation, when one can be computed.
enum Oracle {
    Gaussian(GaussianPosterior),
    Grid(GridOracle),
}

impl Oracle {
    fn as_dyn(&self) -> &dyn PosteriorOracle {
        match self {
            Oracle::Gaussian(o) => o,
            Oracle::Grid(o) => o,
        }
    }
}

struct Problem {
    model: MeasurementModel,
    x_true: Vector,
    obs: Observation,
    oracle: Option<Oracle>,
    score: Box<dyn ScoreModel>,
}

/// Draws the task, ground truth and observation for `seed` from its problem
/// stream, so every method and budget at that seed sees the same problem.
fn build_problem(cfg: &ExperimentConfig, prior: &GmmPrior, seed: u64) -> Result<Problem> {
    let mut rng = keyed_rng(cfg.master_seed, seed, PROBLEM_STREAM);
    let d = prior.dim();
    let model = make_task(&cfg.task.name, SignalShape::Line(d), &cfg.task.params, &mut rng)?;
    let x_true = prior.sample(&mut rng);
    let obs = model.observe(&x_true, &mut rng)?;

    let oracle = if model.sigma_n() == 0.0 {
        None
    } else if let (Some(g), true) = (prior.as_gaussian(), model.is_linear()) {
        let a = model.dense_matrix()?;
        Some(Oracle::Gaussian(gaussian_linear_posterior(g, &a, &obs.y, model.sigma_n())?))
    } else if d <= 2 {
        let spec = GridSpec::new(cfg.oracle.grid_resolution);
        Some(Oracle::Grid(grid_posterior(prior, &model, &obs, &spec)?))
    } else {
        None
    };

    let score: Box<dyn ScoreModel> = if cfg.score.epsilon > 0.0 {
        Box::new(PerturbedScore::new(prior.clone(), cfg.score.epsilon, seed)?)
    } else {
        Box::new(prior.clone())
    };
    Ok(Problem { model, x_true, obs, oracle, score })
}

#[derive(Debug, Clone, Copy)]
struct RunSpec {
    method: Method,
    budget: usize,
    seed: u64,
    reps: RepsConfig,
}

impl RunSpec {
    fn nfe(&self) -> u64 {
        match self.method {
            Method::Ode | Method::Sde => self.budget as u64,
            Method::Reps => self.reps.nfe(),
        }
    }

    fn ode_steps(&self) -> Option<usize> {
        (self.method == Method::Reps).then_some(self.reps.ode_steps_per_leg)
    }
}

fn single_pass_grid(reps: &RepsConfig, steps: usize) -> Result<StepGrid> {
    let grid = ode_grid(reps.sigma_max, reps.sigma_zero, steps, reps.rho_ode)?;
    Ok(match reps.terminal {
        Terminal::SigmaZero => grid,
        Terminal::Zero => grid.with_terminal_zero(),
    })
}

fn draw_samples(cfg: &ExperimentConfig, spec: &RunSpec, problem: &Problem) -> Result<Vec<Vector>> {
    let cond = Conditioner::new(&problem.model, &problem.obs, spec.reps.lambda, spec.reps.map)?
        .with_init(spec.reps.map_init);
    let score = problem.score.as_ref();
    let grid = match spec.method {
        Method::Ode | Method::Sde => Some(single_pass_grid(&spec.reps, spec.budget)?),
        Method::Reps => None,
    };
    (0..cfg.chains as u64)
        .map(|c| {
            let rng = chain_rng(cfg.master_seed, spec.seed, c);
            let run = match (spec.method, &grid) {
                (Method::Ode, Some(g)) => cond_ode_sample(score, &cond, g, rng)?,
                (Method::Sde, Some(g)) => cond_sde_sample(score, &cond, g, rng)?,
                _ => reps_sample(score, &cond, &spec.reps, rng)?,
            };
            Ok(run.x)
        })
        .collect()
}

/// Per-chain reconstruction metrics averaged over chains, plus the oracle
/// comparisons of the chain ensemble.
fn score_samples(cfg: &ExperimentConfig, problem: &Problem, samples: &[Vector]) -> Result<MetricReport> {
    let params = SsimParams { window: cfg.metrics.ssim_window, peak: cfg.metrics.peak, ..SsimParams::default() };
    let n = samples.len() as f64;
    let mut sums = [Some(0.0); 3];
    for x in samples {
        let r = MetricReport::reconstruction(x, &problem.x_true, &params)?;
        for (acc, v) in sums.iter_mut().zip([r.psnr, r.ssim, r.mse]) {
            *acc = acc.zip(v).map(|(a, b)| a + b);
        }
    }
    let [psnr, ssim, mse] = sums.map(|s| s.map(|v| v / n));

    let (mut posterior_mean_err, mut tv_distance) = (None, None);
    if let Some(oracle) = problem.oracle.as_ref().map(Oracle::as_dyn) {
        let mean = samples.iter().fold(Vector::zeros(oracle.dim()), |acc, x| acc + x) / n;
        posterior_mean_err = Some((mean - oracle.mean()).norm());
        if samples.len() >= 100 {
            tv_distance = oracle.tv_distance(samples);
        }
    }
    Ok(MetricReport { psnr, ssim, mse, posterior_mean_err, tv_distance })
}

fn execute(cfg: &ExperimentConfig, specs: Vec<RunSpec>) -> Result<Vec<RunRecord>> {
    let hash = cfg.hash()?;
    let prior = cfg.load_prior()?;
    let mut seeds: Vec<u64> = specs.iter().map(|s| s.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let problems: HashMap<u64, std::result::Result<Problem, String>> = seeds
        .par_iter()
        .map(|&s| (s, build_problem(cfg, &prior, s).map_err(|e| e.to_string())))
        .collect();

    let records = specs
        .par_iter()
        .map(|spec| {
            let start = Instant::now();
            let outcome = problems[&spec.seed].as_ref().map_err(Clone::clone).and_then(|p| {
                draw_samples(cfg, spec, p).and_then(|xs| score_samples(cfg, p, &xs)).map_err(|e| e.to_string())
            });
            let wall = start.elapsed().as_secs_f64();
            let (metrics, error) = match outcome {
                Ok(m) => (m, None),
                Err(e) => (MetricReport::default(), Some(e)),
            };
            RunRecord {
                method: spec.method,
                task: cfg.task.name.clone(),
                nfe: spec.nfe(),
                seed: spec.seed,
                ode_steps: spec.ode_steps(),
                metrics,
                wall_s: cfg.timing.then_some(wall),
                error,
                config_hash: hash.clone(),
            }
        })
        .collect();
    Ok(records)
}

/// Runs every (method, budget, seed) combination, in that nesting order.
///
/// Failures of individual runs are stored in the record's `error` field and
/// never abort the sweep. Runs execute on the current rayon pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let mut specs = Vec::new();
    for &method in &cfg.methods {
        for &budget in &cfg.nfe {
            let mut reps = cfg.reps;
            if method == Method::Reps {
                reps.n_restarts = reps.restarts_for_budget(budget)?;
            }
            for &seed in &cfg.seeds {
                specs.push(RunSpec { method, budget, seed, reps });
            }
        }
    }
    execute(cfg, specs)
}

/// RePS at a fixed total budget for each ODE-steps-per-leg value.
///
/// The initial leg is paid for out of the budget, so each run uses
/// `total_nfe / steps − 1` restarts and exactly `total_nfe` denoiser calls.
pub fn ablate_ode_steps(cfg: &ExperimentConfig, steps_list: &[usize], total_nfe: usize) -> Result<Vec<RunRecord>> {
    if steps_list.is_empty() {
        return Err(HarnessError::InvalidConfig("no step counts to ablate".into()));
    }
    let mut specs = Vec::new();
    for &steps in steps_list {
        if steps == 0 || !total_nfe.is_multiple_of(steps) {
            return Err(HarnessError::InvalidConfig(format!(
                "{steps} steps per leg does not divide the budget {total_nfe}"
            )));
        }
        let mut reps = RepsConfig { ode_steps_per_leg: steps, include_initial_leg_in_budget: true, ..cfg.reps };
        reps.n_restarts = reps.restarts_for_budget(total_nfe)?;
        reps.validate()?;
        for &seed in &cfg.seeds {
            specs.push(RunSpec { method: Method::Reps, budget: total_nfe, seed, reps });
        }
    }
    let mut base = cfg.clone();
    base.methods = vec![Method::Reps];
    base.nfe = vec![total_nfe];
    execute(&base, specs)
}
