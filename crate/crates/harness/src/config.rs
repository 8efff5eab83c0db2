//! Experiment configuration files.
//!
//! ```toml
//! prior = "../fixtures/gmm2d.toml"
//! methods = ["ode", "sde", "reps"]
//! nfe = [100, 1000]
//! seeds = [0, 1, 2]
//! chains = 200
//!
//! [task]
//! name = "inpaint_random"
//! params = { keep_fraction = 0.5, sigma_n = 0.05 }
//!
//! [reps]
//! lambda = 1.5
//! map = { method = "adam", eta = 0.01, n_steps = 50 }
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use reps_core::measurements::{TaskParams, TASK_NAMES};
use reps_core::priors::{GmmPrior, PriorSpec};
use reps_core::samplers::RepsConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "REPS_OUT_DIR";

/// Output directory used when neither the config, the environment nor the CLI names one.
pub const DEFAULT_OUT_DIR: &str = "reps-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ode,
    Sde,
    Reps,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ode => "ode",
            Method::Sde => "sde",
            Method::Reps => "reps",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    #[serde(default)]
    pub params: TaskParams,
}

/// Optional error field added to the prior score.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    /// Denoiser error scale; `0` uses the exact score.
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Cells per axis of the grid posterior (priors of dimension 1 or 2 only).
    pub grid_resolution: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { grid_resolution: 128 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub peak: f64,
    pub ssim_window: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { peak: 1.0, ssim_window: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub prior: PathBuf,
    pub task: TaskConfig,
    pub methods: Vec<Method>,
    /// NFE budgets. ODE and SDE runs take this many steps; RePS runs fit as many
    /// restarts as the budget allows (see `RepsConfig::restarts_for_budget`).
    pub nfe: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub master_seed: u64,
    /// Independent chains per run. Metrics are averaged over chains; the
    /// posterior-mean error uses the chain average.
    #[serde(default = "one")]
    pub chains: usize,
    #[serde(default)]
    pub reps: RepsConfig,
    #[serde(default)]
    pub score: ScoreConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    /// Record per-run wall-clock seconds. Turning this off makes results.csv
    /// byte-for-byte reproducible.
    #[serde(default = "yes")]
    pub timing: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Parses, resolves relative paths against the file's directory and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Read { path: path.into(), source })?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.prior);
        if let Some(p) = self.task.params.kernel_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.task.params.mask_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.out_dir.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::InvalidConfig(msg));
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if self.nfe.is_empty() {
            return bad("at least one NFE budget is required".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.chains == 0 {
            return bad("chains must be >= 1".into());
        }
        if self.nfe.contains(&0) {
            return bad("NFE budgets must be positive".into());
        }
        if !TASK_NAMES.contains(&self.task.name.as_str()) {
            return bad(format!("unknown task `{}` (known: {})", self.task.name, TASK_NAMES.join(", ")));
        }
        if !(self.score.epsilon >= 0.0) || !self.score.epsilon.is_finite() {
            return bad(format!("score epsilon {} must be >= 0", self.score.epsilon));
        }
        if self.metrics.ssim_window == 0 || !(self.metrics.peak > 0.0) {
            return bad("metrics need a positive peak and window".into());
        }
        let files = [Some(&self.prior), self.task.params.kernel_file.as_ref(), self.task.params.mask_file.as_ref()];
        for f in files.into_iter().flatten() {
            if !f.is_file() {
                return bad(format!("file {} does not exist", f.display()));
            }
        }
        if self.methods.contains(&Method::Reps) {
            for &budget in &self.nfe {
                self.reps.restarts_for_budget(budget)?;
            }
        }
        self.reps.validate()?;
        Ok(())
    }

    pub fn load_prior(&self) -> Result<GmmPrior> {
        Ok(GmmPrior::load(&self.prior)?)
    }

    /// SHA-256 over a canonical JSON rendering of the config.
    ///
    /// The prior enters through its parsed contents, defaults are filled in, and
    /// the output directory is left out, so two files that describe the same
    /// experiment hash the same regardless of key order or layout.
    pub fn hash(&self) -> Result<String> {
        let text = std::fs::read_to_string(&self.prior)
            .map_err(|source| HarnessError::Read { path: self.prior.clone(), source })?;
        let prior: PriorSpec = toml::from_str(&text)?;
        let mut value = serde_json::to_value(self)?;
        let map = value.as_object_mut().expect("config serializes to an object");
        map.remove("out_dir");
        map.insert("prior".into(), serde_json::to_value(prior)?);
        let canonical = serde_json::to_string(&sort_keys(value))?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }

    /// CLI flag, then the environment variable, then the config, then the default.
    pub fn output_dir(&self, cli: Option<&Path>) -> PathBuf {
        if let Some(p) = cli {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}

fn sort_keys(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut entries: Vec<_> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}
