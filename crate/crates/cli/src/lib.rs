//! Experiment runner for flowpg.
//!
//! A run is driven by one JSON config (see [`config::ExperimentConfig`]) and
//! lives in its output directory:
//!
//! ```text
//! data/train.fpgd, data/eval.fpgd        generate-data
//! checkpoints/initial.fpg                train
//! checkpoints/<i>_<stage>/*.fpg          train, one directory per stage
//! train_log.csv, cfm_mse.csv             train, one row per evaluation
//! metrics.json, summary.json             train
//! log_weights_{model,target}.csv         train (raw weights behind the ESS)
//! plot/*.csv                             plot-data
//! manifests/<command>.json               every command
//! ```

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use flowpg_core::train::Estimator;

pub use error::{CliError, CliResult};

/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "FLOWPG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "flowpg", version, about = "Flow matching and path-gradient training for Boltzmann generators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set stages.1.lr=0.005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw the training and evaluation datasets.
    GenerateData(ConfigArgs),
    /// Run the configured training stages.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a dataset.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target samples for NLL and ESS_p (default: the configured eval set).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory (default: `<output_dir>/eval`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of fresh flow samples for ESS_q.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Gradient-estimator variance in the analytic toy family (CSV).
    VarianceLab {
        /// Batch shape `NxD`. Repeatable.
        #[arg(long = "size", default_values = ["16x2", "64x8"])]
        sizes: Vec<commands::variance::Size>,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0.0)]
        theta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "estimator", value_enum, default_values = ["fm", "ml", "pg"])]
        estimators: Vec<EstimatorArg>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export plot-ready CSVs from a finished run directory.
    PlotData {
        run_dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum EstimatorArg {
    Fm,
    Ml,
    Pg,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Fm => Estimator::Fm,
            EstimatorArg::Ml => Estimator::Ml,
            EstimatorArg::Pg => Estimator::Pg,
        }
    }
}

/// Applies `FLOWPG_THREADS` to the global thread pool, if set.
pub fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV}={raw} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("{THREADS_ENV}: {e}")))
}

pub fn run(command: Command) -> CliResult<()> {
    init_threads()?;
    match command {
        Command::GenerateData(a) => {
            let (cfg, snap) = config::load(&a.config, &a.overrides)?;
            let m = commands::generate::run(&cfg, snap)?;
            report(&m);
        }
        Command::Train(a) => {
            let (cfg, snap) = config::load(&a.config, &a.overrides)?;
            let m = commands::train::run(&cfg, snap)?;
            report(&m);
        }
        Command::Evaluate { config: a, checkpoint, dataset, out, samples, seed } => {
            let (cfg, snap) = config::load(&a.config, &a.overrides)?;
            let args = commands::evaluate::EvaluateArgs { checkpoint, dataset, out, samples, seed };
            let m = commands::evaluate::run(&cfg, snap, &args)?;
            report(&m);
        }
        Command::VarianceLab { sizes, trials, theta, seed, estimators, out } => {
            let args = commands::variance::VarianceArgs {
                sizes,
                trials,
                theta,
                seed,
                estimators: estimators.into_iter().map(Into::into).collect(),
            };
            match out {
                Some(path) => {
                    let mut w = commands::create(&path)?;
                    commands::variance::run(&args, &mut w)?;
                    w.flush().map_err(|source| CliError::Io { path, source })?;
                }
                None => commands::variance::run(&args, std::io::stdout().lock())?,
            }
        }
        Command::PlotData { run_dir, bins } => {
            let m = commands::plot::run(&run_dir, bins)?;
            report(&m);
        }
    }
    Ok(())
}

fn report(m: &manifest::RunManifest) {
    for f in &m.files {
        eprintln!("wrote {} ({} bytes)", f.path, f.bytes);
    }
}
