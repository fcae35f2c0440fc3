use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flowpg_core::metrics::{eval_integrator, evaluate, MetricsReport};
use flowpg_core::train::load_checkpoint;
use flowpg_core::{Dataset, Params};

use super::{load_dataset, write_json, write_weights};
use crate::commands::train::{MODEL_WEIGHTS, TARGET_WEIGHTS};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{DirLock, Recorder, RunManifest};

pub const REPORT: &str = "report.json";

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    /// Defaults to the configured evaluation set.
    pub dataset: Option<PathBuf>,
    /// Defaults to `<output_dir>/eval`.
    pub out: Option<PathBuf>,
    pub samples: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub checkpoint: String,
    pub dataset: String,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

fn describe(p: &Params) -> String {
    serde_json::to_string(p.arch()).unwrap_or_else(|_| format!("{:?}", p.arch()))
}

pub fn run(cfg: &ExperimentConfig, snapshot: serde_json::Value, args: &EvaluateArgs) -> CliResult<RunManifest> {
    let params: Params = load_checkpoint(&args.checkpoint)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.checkpoint.display())))?;
    if params.arch() != &cfg.arch {
        return Err(CliError::ArchMismatch {
            checkpoint: describe(&params),
            configured: serde_json::to_string(&cfg.arch).unwrap_or_default(),
        });
    }
    let data_path = args.dataset.clone().unwrap_or_else(|| cfg.eval_path());
    let data: Dataset = load_dataset(&data_path)?;
    if data.dim() != cfg.target.dim() {
        return Err(CliError::Config(format!(
            "dataset {} has dimension {}, target has {}",
            data_path.display(),
            data.dim(),
            cfg.target.dim()
        )));
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.join("eval"));
    let _lock = DirLock::acquire(&out)?;
    let n_model = args.samples.unwrap_or(cfg.eval.n_model_samples);
    let ev = evaluate(&params, &cfg.base(), &cfg.target, &data.samples, n_model, args.seed, &eval_integrator())?;

    let mut rec = Recorder::new(&out, "evaluate", snapshot);
    let report = EvaluationReport {
        checkpoint: display(&args.checkpoint),
        dataset: display(&data_path),
        seed: args.seed,
        metrics: ev.report,
    };
    let p = out.join(REPORT);
    write_json(&p, &report)?;
    rec.add(&p, false)?;
    let p = out.join(MODEL_WEIGHTS);
    write_weights(&p, &ev.model_weights, &ev.model_samples, &cfg.target)?;
    rec.add(&p, false)?;
    let p = out.join(TARGET_WEIGHTS);
    write_weights(&p, &ev.target_weights, &data.samples, &cfg.target)?;
    rec.add(&p, false)?;
    rec.finish()
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}
