use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reps_harness::{ablate_ode_steps, emit_outputs, run_experiment, ExperimentConfig, Figure, RunRecord};

#[derive(Parser)]
#[command(name = "reps", version, about = "Seeded sweeps for restart posterior sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Output directory. Overrides REPS_OUT_DIR and the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    jobs: Option<usize>,
    /// Also write SVG plots.
    #[arg(long)]
    plots: bool,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method x NFE budget x seed combination.
    Run(Common),
    /// RePS at a fixed budget for several ODE-steps-per-restart values.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20,50")]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        nfe: usize,
    },
}

fn run(cli: Cli) -> reps_harness::Result<Vec<RunRecord>> {
    let (common, ablation) = match cli.command {
        Command::Run(c) => (c, None),
        Command::Ablate { common, steps, nfe } => (common, Some((steps, nfe))),
    };
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = common.jobs {
        pool = pool.num_threads(j.max(1));
    }
    let pool = pool.build().map_err(|e| reps_harness::HarnessError::InvalidConfig(e.to_string()))?;
    let (records, figure) = pool.install(|| match &ablation {
        None => run_experiment(&cfg).map(|r| (r, Figure::Nfe)),
        Some((steps, nfe)) => ablate_ode_steps(&cfg, steps, *nfe).map(|r| (r, Figure::OdeSteps)),
    })?;
    let out_dir = cfg.output_dir(common.out.as_deref());
    for path in emit_outputs(&records, &out_dir, figure, common.plots)? {
        println!("{}", path.display());
    }
    Ok(records)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(records) => {
            let failed: Vec<_> = records.iter().filter(|r| r.error.is_some()).collect();
            if failed.is_empty() {
                return ExitCode::SUCCESS;
            }
            eprintln!("{} of {} runs failed", failed.len(), records.len());
            for r in failed {
                eprintln!("  {} nfe={} seed={}: {}", r.method, r.nfe, r.seed, r.error.as_deref().unwrap_or(""));
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
