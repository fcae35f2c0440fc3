//! Tidy CSV exports of a finished run. Nothing is rendered.

use std::path::Path;

use serde::Serialize;

use flowpg_core::train::LogRow;

use super::train::{MseRow, CFM_MSE_LOG, MODEL_WEIGHTS, TARGET_WEIGHTS, TRAIN_LOG};
use super::{csv_error, csv_writer, read_weights, WeightRow};
use crate::error::{CliError, CliResult, IoContext};
use crate::manifest::{read_manifest, verify, DirLock, Recorder, RunManifest};

pub const LEARNING_CURVES: &str = "learning_curves.csv";
pub const TRAJECTORY_LENGTH: &str = "trajectory_length.csv";
pub const WEIGHT_HISTOGRAM: &str = "weight_histogram.csv";
pub const ENERGY_HISTOGRAM: &str = "energy_histogram.csv";

#[derive(Serialize)]
struct CurveRow<'a> {
    stage: &'a str,
    step: u64,
    wall_seconds: f64,
    loss: Option<f64>,
    fwd_kl: Option<f64>,
    nll: Option<f64>,
    ess_q: Option<f64>,
    ess_p: Option<f64>,
    traj_len: Option<f64>,
    grad_norm: Option<f64>,
    cfm_mse: Option<f64>,
}

impl<'a> CurveRow<'a> {
    fn new(r: &'a LogRow, cfm_mse: Option<f64>) -> Self {
        Self {
            stage: &r.stage,
            step: r.step,
            wall_seconds: r.wall_seconds,
            loss: r.loss,
            fwd_kl: r.fwd_kl,
            nll: r.nll,
            ess_q: r.ess_q,
            ess_p: r.ess_p,
            traj_len: r.traj_len,
            grad_norm: r.grad_norm,
            cfm_mse,
        }
    }
}

#[derive(Serialize)]
struct TrajRow<'a> {
    stage: &'a str,
    step: u64,
    wall_seconds: f64,
    traj_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bin {
    pub series: String,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Histogram over `[lo, hi)` in `bins` equal bins, with an underflow bin
/// below and an overflow bin above (the latter also takes `+inf`, the former
/// `-inf`), so the counts always add up to `values.len()`.
pub fn histogram(series: &str, values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<Bin> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins + 2];
    for &v in values {
        let slot = if v < lo {
            0
        } else if v >= hi {
            bins + 1
        } else {
            1 + (((v - lo) / width) as usize).min(bins - 1)
        };
        counts[slot] += 1;
    }
    let edge = |k: usize| lo + k as f64 * width;
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| {
            let (lo_k, hi_k) = match k {
                0 => (f64::NEG_INFINITY, lo),
                k if k == bins + 1 => (hi, f64::INFINITY),
                k => (edge(k - 1), edge(k)),
            };
            Bin { series: series.into(), lo: lo_k, hi: hi_k, count }
        })
        .collect()
}

/// Range covering the finite values of all series, padded when degenerate.
fn range<'a>(sets: impl IntoIterator<Item = &'a [f64]>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in sets.into_iter().flatten().filter(|v| v.is_finite()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if lo > hi {
        return (0.0, 1.0);
    }
    if hi > lo {
        // Nudge the top edge so the maximum falls inside the last bin.
        (lo, hi + (hi - lo) * 1e-9)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn write_bins(path: &Path, bins: &[Bin]) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    if bins.is_empty() {
        w.write_record(["series", "lo", "hi", "count"]).map_err(|e| csv_error(path, e))?;
    }
    for b in bins {
        w.serialize(b).map_err(|e| csv_error(path, e))?;
    }
    w.flush().at(path)
}

fn read_csv<D: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<D>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().collect::<Result<Vec<D>, _>>().map_err(|e| csv_error(path, e))
}

pub fn run(run_dir: &Path, bins: usize) -> CliResult<RunManifest> {
    if bins == 0 {
        return Err(CliError::Config("--bins must be at least 1".into()));
    }
    let _lock = DirLock::acquire(run_dir)?;
    let train = read_manifest(run_dir, "train")?;
    let mut bad = verify(run_dir, &train)?;
    if let Ok(data) = read_manifest(run_dir, "generate-data") {
        bad.extend(verify(run_dir, &data)?);
    }
    if !bad.is_empty() {
        return Err(CliError::Missing(bad));
    }

    let log: Vec<LogRow> = read_csv(&run_dir.join(TRAIN_LOG))?;
    let mse: Vec<MseRow> = read_csv(&run_dir.join(CFM_MSE_LOG))?;
    if mse.len() != log.len() {
        return Err(CliError::Config(format!(
            "{} has {} rows but {} has {}",
            CFM_MSE_LOG,
            mse.len(),
            TRAIN_LOG,
            log.len()
        )));
    }
    let plot = run_dir.join("plot");
    let mut rec = Recorder::new(run_dir, "plot-data", train.config.clone());

    let p = plot.join(LEARNING_CURVES);
    let mut w = csv_writer(&p)?;
    if log.is_empty() {
        w.write_record([
            "stage", "step", "wall_seconds", "loss", "fwd_kl", "nll", "ess_q", "ess_p", "traj_len", "grad_norm", "cfm_mse",
        ])
        .map_err(|e| csv_error(&p, e))?;
    }
    for (row, m) in log.iter().zip(&mse) {
        w.serialize(CurveRow::new(row, m.cfm_mse)).map_err(|e| csv_error(&p, e))?;
    }
    w.flush().at(&p)?;
    rec.add(&p, true)?;

    let p = plot.join(TRAJECTORY_LENGTH);
    let mut w = csv_writer(&p)?;
    let traj: Vec<TrajRow> = log
        .iter()
        .filter_map(|r| {
            r.traj_len.map(|t| TrajRow { stage: &r.stage, step: r.step, wall_seconds: r.wall_seconds, traj_len: t })
        })
        .collect();
    if traj.is_empty() {
        w.write_record(["stage", "step", "wall_seconds", "traj_len"]).map_err(|e| csv_error(&p, e))?;
    }
    for r in &traj {
        w.serialize(r).map_err(|e| csv_error(&p, e))?;
    }
    w.flush().at(&p)?;
    rec.add(&p, true)?;

    let weights = |name: &str| -> CliResult<Vec<WeightRow>> {
        let p = run_dir.join(name);
        if p.is_file() {
            read_weights(&p)
        } else {
            Ok(Vec::new())
        }
    };
    let model = weights(MODEL_WEIGHTS)?;
    let target = weights(TARGET_WEIGHTS)?;

    // Log-weights are shifted so the largest finite one is zero; the
    // unknown normalizer is irrelevant to the shape.
    let shifted = |rows: &[WeightRow]| -> Vec<f64> {
        let max = rows.iter().map(|r| r.log_w).filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        rows.iter().map(|r| r.log_w - max).collect()
    };
    let (lw_model, lw_target) = (shifted(&model), shifted(&target));
    let energies = |rows: &[WeightRow]| -> Vec<f64> { rows.iter().map(|r| r.energy).collect() };
    let (e_model, e_target) = (energies(&model), energies(&target));

    let mut wbins = Vec::new();
    let mut ebins = Vec::new();
    if !model.is_empty() || !target.is_empty() {
        let (lo, hi) = range([lw_model.as_slice(), lw_target.as_slice()]);
        wbins.extend(histogram("model", &lw_model, lo, hi, bins));
        wbins.extend(histogram("target", &lw_target, lo, hi, bins));
        // The energy range follows the target samples; model samples far
        // outside it land in the under/overflow bins.
        let (lo, hi) = range([e_target.as_slice()]);
        ebins.extend(histogram("model", &e_model, lo, hi, bins));
        ebins.extend(histogram("target", &e_target, lo, hi, bins));
    }
    let p = plot.join(WEIGHT_HISTOGRAM);
    write_bins(&p, &wbins)?;
    rec.add(&p, false)?;
    let p = plot.join(ENERGY_HISTOGRAM);
    write_bins(&p, &ebins)?;
    rec.add(&p, false)?;
    rec.finish()
}
