use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use flowpg_core::metrics::{eval_integrator, evaluate, MetricsReport};
use flowpg_core::rng::{derive_seed, Stream};
use flowpg_core::targets::EnergyModel;
use flowpg_core::train::{
    cfm_loss, run_training, write_log_csv, Coupling, EvalRecord, LogRow, RunOptions, StopReason,
};
use flowpg_core::vectorfield::{init_params, write_checkpoint};
use flowpg_core::{Batch, Dataset, FlowError, OptimizerState, Params};

use super::{create, csv_error, csv_writer, files_under, load_dataset, write_json, write_weights};
use crate::config::ExperimentConfig;
use crate::error::{CliResult, IoContext};
use crate::manifest::{DirLock, Recorder, RunManifest};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const CFM_MSE_LOG: &str = "cfm_mse.csv";
pub const SUMMARY: &str = "summary.json";
pub const METRICS: &str = "metrics.json";
pub const DIVERGENCE: &str = "divergence.json";
pub const MODEL_WEIGHTS: &str = "log_weights_model.csv";
pub const TARGET_WEIGHTS: &str = "log_weights_target.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub index: usize,
    pub stage: String,
    pub steps: u64,
    pub train_seconds: f64,
    pub stop: StopReason,
    /// Checkpoint holding the parameters this stage ended with.
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stages: Vec<StageSummary>,
    pub total_steps: u64,
    pub total_train_seconds: f64,
    /// Absent when no optimizer step was taken.
    pub metrics: Option<MetricsReport>,
}

/// One flow-matching loss value per training-log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub row: usize,
    pub stage: String,
    pub cfm_mse: Option<f64>,
}

/// Fixed draws reused by every in-training evaluation, so successive log
/// rows differ only through the parameters.
struct Monitor<'a> {
    base: &'a EnergyModel,
    target: &'a EnergyModel,
    test: Batch,
    x0: Batch,
    n_model: usize,
    seed: u64,
    mse: Vec<MseRow>,
}

impl Monitor<'_> {
    fn record(&mut self, stage: &str, sigma: f64, p: &Params) -> flowpg_core::Result<EvalRecord> {
        let row = self.mse.len();
        let mse = cfm_loss(p, &self.x0, &self.test, Coupling::Independent, sigma, derive_seed(self.seed, Stream::Eval, 2)).ok();
        self.mse.push(MseRow { row, stage: stage.to_string(), cfm_mse: mse });
        // A field that cannot be integrated gets an empty row; the training
        // loop itself decides whether the run has diverged.
        match evaluate(p, self.base, self.target, &self.test, self.n_model, derive_seed(self.seed, Stream::Eval, 0), &eval_integrator()) {
            Ok(ev) => Ok(EvalRecord {
                fwd_kl: ev.report.fwd_kl,
                nll: Some(ev.report.nll),
                ess_q: Some(ev.report.ess_q),
                ess_p: Some(ev.report.ess_p),
                traj_len: Some(ev.report.traj_len_mean),
            }),
            Err(_) => Ok(EvalRecord::default()),
        }
    }
}

fn write_params(path: &Path, p: &Params) -> CliResult<()> {
    let mut w = create(path)?;
    write_checkpoint(p, &mut w)?;
    w.flush().at(path)
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

pub fn run(cfg: &ExperimentConfig, snapshot: serde_json::Value) -> CliResult<RunManifest> {
    let out = cfg.output_dir.clone();
    let _lock = DirLock::acquire(&out)?;
    let train: Dataset = load_dataset(&cfg.train_path())?;
    let eval: Dataset = load_dataset(&cfg.eval_path())?;
    if train.model != cfg.target || eval.model != cfg.target {
        return Err(crate::error::CliError::Config(
            "dataset files were generated for a different target; rerun generate-data".into(),
        ));
    }
    let base = cfg.base();
    let n_log = cfg.eval.n_log_samples.min(eval.len());
    let mut monitor = Monitor {
        base: &base,
        target: &cfg.target,
        test: eval.samples.slice_rows(0, n_log),
        x0: base.sample_exact(n_log, derive_seed(cfg.seed, Stream::Eval, 1))?,
        n_model: cfg.eval.n_model_samples.min(cfg.eval.n_log_samples),
        seed: cfg.seed,
        mse: Vec::new(),
    };

    let ckpt_root = out.join("checkpoints");
    let mut params: Params = init_params(&cfg.arch, derive_seed(cfg.seed, Stream::Init, 0))?;
    write_params(&ckpt_root.join("initial.fpg"), &params)?;
    let mut last_checkpoint = ckpt_root.join("initial.fpg");

    let mut optimizer: Option<OptimizerState> = None;
    let mut log: Vec<LogRow> = Vec::new();
    let mut stages = Vec::new();
    let mut diverged = None;
    for (i, stage) in cfg.stages.iter().enumerate() {
        let tc = stage.train_config(cfg.seed, i, &cfg.integrator);
        let dir = ckpt_root.join(format!("{i}_{}", stage.stage.name()));
        let name = stage.stage.name();
        let sigma = tc.sigma;
        let mut hook = |p: &Params| monitor.record(name, sigma, p);
        let opts = RunOptions {
            base: &base,
            eval: Some(&mut hook),
            checkpoint_dir: Some(&dir),
            optimizer: if stage.resume_optimizer { optimizer.take() } else { None },
        };
        let outcome = run_training(stage.stage, &tc, &train, &params, opts)?;
        let final_ckpt = dir.join(format!("{name}_final.fpg"));
        let checkpoint = if final_ckpt.is_file() {
            last_checkpoint = final_ckpt.clone();
            Some(rel(&out, &final_ckpt))
        } else {
            None
        };
        log.extend(outcome.log);
        params = outcome.params;
        optimizer = Some(outcome.optimizer);
        if let StopReason::Diverged { step, message } = &outcome.stop {
            diverged = Some((i, name, *step, message.clone()));
        }
        stages.push(StageSummary {
            index: i,
            stage: name.to_string(),
            steps: outcome.steps,
            train_seconds: outcome.train_seconds,
            stop: outcome.stop,
            checkpoint,
        });
        if diverged.is_some() {
            break;
        }
    }

    let mut rec = Recorder::new(&out, "train", snapshot);
    let log_path = out.join(TRAIN_LOG);
    let mut w = create(&log_path)?;
    write_log_csv(&log, &mut w)?;
    w.flush().at(&log_path)?;
    rec.add(&log_path, true)?;

    let mse_path = out.join(CFM_MSE_LOG);
    let mut w = csv_writer(&mse_path)?;
    if monitor.mse.is_empty() {
        w.write_record(["row", "stage", "cfm_mse"]).map_err(|e| csv_error(&mse_path, e))?;
    }
    for r in &monitor.mse {
        w.serialize(r).map_err(|e| csv_error(&mse_path, e))?;
    }
    w.flush().at(&mse_path)?;
    rec.add(&mse_path, false)?;

    let total_steps = stages.iter().map(|s| s.steps).sum();
    let total_train_seconds = stages.iter().map(|s| s.train_seconds).sum();
    let mut metrics = None;
    if total_steps > 0 && diverged.is_none() {
        let ev = evaluate(
            &params,
            &base,
            &cfg.target,
            &eval.samples,
            cfg.eval.n_model_samples,
            derive_seed(cfg.seed, Stream::Eval, 3),
            &eval_integrator(),
        )?;
        let p = out.join(METRICS);
        write_json(&p, &ev.report)?;
        rec.add(&p, false)?;
        let p = out.join(MODEL_WEIGHTS);
        write_weights(&p, &ev.model_weights, &ev.model_samples, &cfg.target)?;
        rec.add(&p, false)?;
        let p = out.join(TARGET_WEIGHTS);
        write_weights(&p, &ev.target_weights, &eval.samples, &cfg.target)?;
        rec.add(&p, false)?;
        metrics = Some(ev.report);
    }

    let summary = TrainSummary { stages, total_steps, total_train_seconds, metrics };
    let p = out.join(SUMMARY);
    write_json(&p, &summary)?;
    rec.add(&p, true)?;

    if let Some((index, stage, step, message)) = &diverged {
        let p = out.join(DIVERGENCE);
        let record = serde_json::json!({
            "stage_index": index,
            "stage": stage,
            "step": step,
            "message": message,
            "last_checkpoint": rel(&out, &last_checkpoint),
        });
        write_json(&p, &record)?;
        rec.add(&p, false)?;
    }
    for f in files_under(&ckpt_root)? {
        rec.add(&f, false)?;
    }
    let manifest = rec.finish()?;
    if let Some((_, stage, step, message)) = diverged {
        return Err(FlowError::IntegrationDiverged {
            step: step as usize,
            t: f64::NAN,
            detail: format!("stage {stage}: {message}; last checkpoint {}", last_checkpoint.display()),
        }
        .into());
    }
    Ok(manifest)
}
