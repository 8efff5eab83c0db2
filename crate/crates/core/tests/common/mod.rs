#![allow(dead_code)]

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reps_core::measurements::{make_task, MeasurementModel, Observation, SignalShape, TaskParams};
use reps_core::priors::GmmPrior;
use reps_core::Vector;
use serde::Deserialize;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture_path(name)).unwrap_or_else(|e| panic!("fixture {name}: {e}"))
}

pub fn load_prior(name: &str) -> GmmPrior {
    GmmPrior::from_toml_str(&read_fixture(name)).expect("prior fixture")
}

/// Per-chain generator: one seed, one ChaCha stream per chain.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

#[derive(Debug, Clone, Deserialize)]
pub struct Benchmark {
    pub task: String,
    #[serde(default)]
    pub task_seed: u64,
    pub lambda: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    #[serde(default = "default_sigma_restart")]
    pub sigma_restart: f64,
    #[serde(default)]
    pub n_restarts: Option<usize>,
    #[serde(default)]
    pub chains: usize,
    #[serde(default)]
    pub grid_resolution: Option<usize>,
    #[serde(default)]
    pub grid_levels: Option<usize>,
    #[serde(default)]
    pub runs_per_measurement: Option<usize>,
    #[serde(default)]
    pub seeds: Option<u64>,
    #[serde(default)]
    pub params: TaskParams,
}

fn default_eta() -> f64 {
    1e-2
}

fn default_n_steps() -> usize {
    50
}

fn default_sigma_restart() -> f64 {
    10.0
}

#[derive(Debug, Clone, Deserialize)]
pub struct Contraction {
    pub epsilon: f64,
    pub seeds: u64,
    pub chains: u64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct FixtureFile {
    pub benchmark: Benchmark,
    pub contraction: Option<Contraction>,
}

pub fn load_benchmark(name: &str) -> FixtureFile {
    toml::from_str(&read_fixture(name)).expect("benchmark section")
}

pub struct Problem {
    pub model: MeasurementModel,
    pub x_true: Vector,
    pub obs: Observation,
}

/// Task, ground truth and observation, all drawn from one seeded stream.
pub fn draw_problem(prior: &GmmPrior, bench: &Benchmark, seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = make_task(&bench.task, SignalShape::Line(prior.dim()), &bench.params, &mut rng).expect("task");
    let x_true = prior.sample(&mut rng);
    let obs = model.observe(&x_true, &mut rng).expect("observation");
    Problem { model, x_true, obs }
}
