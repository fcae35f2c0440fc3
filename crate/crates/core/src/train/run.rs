use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, cfm_loss_grad, clip_and_accumulate, grad_norm, ml_grad, pg_grad, Coupling, GradEstimate, Loss,
    OptimizerState, Stage, TrainConfig,
};
use crate::batch::SampleBatch;
use crate::error::{FlowError, Result};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::scalar::Real;
use crate::targets::{Dataset, EnergyModel};
use crate::vectorfield::{write_checkpoint, FieldParams};

/// Metrics an evaluation hook may supply for a log row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub fwd_kl: Option<f64>,
    pub nll: Option<f64>,
    pub ess_q: Option<f64>,
    pub ess_p: Option<f64>,
    pub traj_len: Option<f64>,
}

pub trait EvalHook<T> {
    fn evaluate(&mut self, params: &FieldParams<T>) -> Result<EvalRecord>;
}

impl<T, F: FnMut(&FieldParams<T>) -> Result<EvalRecord>> EvalHook<T> for F {
    fn evaluate(&mut self, params: &FieldParams<T>) -> Result<EvalRecord> {
        self(params)
    }
}

/// One row of the training log. `loss` and `grad_norm` average the steps
/// since the previous row; `grad_norm` is taken before clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: String,
    pub step: u64,
    pub wall_seconds: f64,
    pub loss: Option<f64>,
    pub fwd_kl: Option<f64>,
    pub nll: Option<f64>,
    pub ess_q: Option<f64>,
    pub ess_p: Option<f64>,
    pub traj_len: Option<f64>,
    pub grad_norm: Option<f64>,
}

pub fn write_log_csv<W: Write>(rows: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["stage", "step", "wall_seconds", "loss", "fwd_kl", "nll", "ess_q", "ess_p", "traj_len", "grad_norm"])
        .map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> FlowError {
    FlowError::Format(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    Budget,
    /// Integration or the update went non-finite; parameters are those of
    /// the last good step.
    Diverged { step: u64, message: String },
}

pub struct RunOptions<'a, T> {
    pub base: &'a EnergyModel,
    pub eval: Option<&'a mut dyn EvalHook<T>>,
    pub checkpoint_dir: Option<&'a Path>,
    /// Resume from this optimizer state instead of a fresh one.
    pub optimizer: Option<OptimizerState<T>>,
}

impl<'a, T> RunOptions<'a, T> {
    pub fn new(base: &'a EnergyModel) -> Self {
        Self { base, eval: None, checkpoint_dir: None, optimizer: None }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome<T> {
    pub params: FieldParams<T>,
    pub optimizer: OptimizerState<T>,
    pub log: Vec<LogRow>,
    pub steps: u64,
    /// Time spent in optimizer steps; evaluations and checkpoints excluded.
    pub train_seconds: f64,
    pub stop: StopReason,
}

#[derive(Serialize, Deserialize)]
struct OptimizerFile {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

pub fn write_optimizer_state<T: Real, W: Write>(state: &OptimizerState<T>, out: W) -> Result<()> {
    let f = OptimizerFile {
        m: state.m.iter().map(|v| v.as_f64()).collect(),
        v: state.v.iter().map(|v| v.as_f64()).collect(),
        step: state.step,
        lr: state.lr,
        beta1: state.beta1,
        beta2: state.beta2,
        eps: state.eps,
    };
    serde_json::to_writer(out, &f)?;
    Ok(())
}

pub fn read_optimizer_state<T: Real, R: Read>(input: R) -> Result<OptimizerState<T>> {
    let f: OptimizerFile = serde_json::from_reader(input)?;
    Ok(OptimizerState {
        m: f.m.into_iter().map(T::lit).collect(),
        v: f.v.into_iter().map(T::lit).collect(),
        step: f.step,
        lr: f.lr,
        beta1: f.beta1,
        beta2: f.beta2,
        eps: f.eps,
    })
}

fn save(dir: &Path, name: &str, params: &FieldParams<impl Real>, opt: &OptimizerState<impl Real>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(format!("{name}.fpg")))?);
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join(format!("{name}.opt.json")))?);
    write_optimizer_state(opt, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by a training run.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<FieldParams<T>> {
    crate::vectorfield::read_checkpoint(BufReader::new(File::open(path)?))
}

fn is_divergence(e: &FlowError) -> bool {
    matches!(e, FlowError::IntegrationDiverged { .. } | FlowError::SingularConfiguration { .. })
}

struct Window {
    loss: f64,
    norm: f64,
    count: usize,
}

impl Window {
    fn take(&mut self) -> (Option<f64>, Option<f64>) {
        let out = if self.count == 0 {
            (None, None)
        } else {
            (Some(self.loss / self.count as f64), Some(self.norm / self.count as f64))
        };
        *self = Window { loss: 0.0, norm: 0.0, count: 0 };
        out
    }
}

/// Runs one training stage from `init`.
///
/// Epoch mode makes `epochs * floor(N / batch_size)` steps over reshuffled
/// data. Budget mode keeps stepping until `budget_seconds` of optimizer time
/// have been used, so it overshoots by at most one step. Identical inputs give identical
/// parameters and log rows apart from `wall_seconds`, as long as the
/// evaluation cadence is step-based.
pub fn run_training<T: Real>(
    stage: Stage,
    config: &TrainConfig,
    dataset: &Dataset<T>,
    init: &FieldParams<T>,
    mut opts: RunOptions<'_, T>,
) -> Result<TrainingOutcome<T>> {
    config.validate()?;
    if !stage.accepts(config.loss) {
        return Err(FlowError::Config(format!("stage {} cannot train with loss {:?}", stage.name(), config.loss)));
    }
    if dataset.dim() != init.dim() {
        return Err(FlowError::Shape("dataset and field dimensions differ".into()));
    }
    if stage == Stage::PgFinetune && dataset.forces.is_none() {
        return Err(FlowError::Config("path-gradient training needs a dataset with forces".into()));
    }
    let n = dataset.len();
    let bs = config.batch_size;
    let per_epoch = n / bs;
    let budget = config.budget_seconds;
    let planned = match budget {
        Some(b) => {
            if b > 0.0 {
                u64::MAX
            } else {
                0
            }
        }
        None => (config.epochs * per_epoch) as u64,
    };
    if per_epoch == 0 && (config.epochs > 0 || budget.is_some_and(|b| b > 0.0)) {
        return Err(FlowError::Config(format!("dataset of {n} samples is smaller than one batch of {bs}")));
    }
    let mut params = init.clone();
    let mut opt = opts.optimizer.take().unwrap_or_else(|| OptimizerState::adam(init.len(), config.lr));
    let mut log = Vec::new();
    if planned == 0 {
        return Ok(TrainingOutcome { params, optimizer: opt, log, steps: 0, train_seconds: 0.0, stop: StopReason::Completed });
    }

    let row = |step: u64, wall: f64, window: &mut Window, eval: &mut Option<&mut dyn EvalHook<T>>, p: &FieldParams<T>| {
        let rec = match eval {
            Some(h) => h.evaluate(p)?,
            None => EvalRecord::default(),
        };
        let (loss, norm) = window.take();
        Ok::<_, FlowError>(LogRow {
            stage: stage.name().to_string(),
            step,
            wall_seconds: wall,
            loss,
            fwd_kl: rec.fwd_kl,
            nll: rec.nll,
            ess_q: rec.ess_q,
            ess_p: rec.ess_p,
            traj_len: rec.traj_len,
            grad_norm: norm,
        })
    };

    let mut window = Window { loss: 0.0, norm: 0.0, count: 0 };
    if opts.eval.is_some() {
        log.push(row(0, 0.0, &mut window, &mut opts.eval, &params)?);
    }

    let acc = config.accumulation_steps;
    let micro = bs / acc;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = per_epoch;
    let mut epoch = 0u64;
    let mut step = 0u64;
    let mut elapsed = 0.0f64;
    let mut next_eval_time = config.eval_every_seconds.unwrap_or(f64::INFINITY);
    let mut last_logged = 0u64;
    let stop = loop {
        if step >= planned {
            break StopReason::Completed;
        }
        if let Some(b) = budget {
            if elapsed >= b {
                break StopReason::Budget;
            }
        }
        if cursor == per_epoch {
            order = (0..n).collect();
            order.shuffle(&mut stream_rng(config.seed, Stream::Batches, epoch));
            epoch += 1;
            cursor = 0;
        }
        let idx = &order[cursor * bs..(cursor + 1) * bs];
        cursor += 1;

        let started = Instant::now();
        let result = (|| {
            let mut grads: Vec<GradEstimate<T>> = Vec::with_capacity(acc);
            for k in 0..acc {
                let sub = &idx[k * micro..(k + 1) * micro];
                let tag = step * acc as u64 + k as u64;
                let x1 = dataset.samples.select(sub);
                let g = match config.loss {
                    Loss::CfmStandard | Loss::CfmOt => {
                        let x0: SampleBatch<T> =
                            opts.base.sample_exact(micro, derive_seed(config.seed, Stream::Base, tag))?;
                        let coupling = if config.loss == Loss::CfmOt { Coupling::Ot } else { Coupling::Independent };
                        cfm_loss_grad(&params, &x0, &x1, coupling, config.sigma, derive_seed(config.seed, Stream::FlowMatching, tag))?
                    }
                    Loss::Ml => {
                        let cfg = config.integrator.with_divergence(config.integrator.divergence, derive_seed(config.seed, Stream::Probe, tag));
                        ml_grad(&params, opts.base, &x1, &cfg)?
                    }
                    Loss::Pg => {
                        let cfg = config.integrator.with_divergence(config.integrator.divergence, derive_seed(config.seed, Stream::Probe, tag));
                        let forces = dataset.forces.as_ref().map(|f| f.select(sub));
                        pg_grad(&params, opts.base, &dataset.model, &x1, forces.as_ref(), &cfg)?
                    }
                };
                grads.push(g);
            }
            let mean = clip_and_accumulate(&grads, None)?;
            let norm = grad_norm(&mean.values).as_f64();
            if !norm.is_finite() {
                return Err(FlowError::IntegrationDiverged { step: 0, t: f64::NAN, detail: "non-finite gradient".into() });
            }
            let clipped = clip_and_accumulate(&[mean], config.grad_clip_norm)?;
            let (next_opt, next_params) = adam_step(&opt, &params, &clipped.values)?;
            if !next_params.values().iter().all(|v| v.is_finite()) {
                return Err(FlowError::IntegrationDiverged { step: 0, t: f64::NAN, detail: "non-finite parameters".into() });
            }
            Ok((next_opt, next_params, clipped.aux, norm))
        })();
        let dt = started.elapsed().as_secs_f64();
        match result {
            Ok((o, p, loss, norm)) => {
                opt = o;
                params = p;
                window.loss += loss.unwrap_or(f64::NAN);
                window.norm += norm;
                window.count += 1;
            }
            Err(e) if is_divergence(&e) => {
                break StopReason::Diverged { step, message: e.to_string() };
            }
            Err(e) => return Err(e),
        }
        step += 1;
        elapsed += dt;

        let due = match budget {
            Some(_) => elapsed >= next_eval_time,
            None => config.eval_every > 0 && step % config.eval_every as u64 == 0,
        };
        if due {
            if let Some(every) = config.eval_every_seconds {
                while next_eval_time <= elapsed {
                    next_eval_time += every;
                }
            }
            log.push(row(step, elapsed, &mut window, &mut opts.eval, &params)?);
            last_logged = step;
        }
        if let Some(dir) = opts.checkpoint_dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every as u64 == 0 {
                save(dir, &format!("{}_step{step}", stage.name()), &params, &opt)?;
            }
        }
    };
    if last_logged != step || log.is_empty() {
        log.push(row(step, elapsed, &mut window, &mut opts.eval, &params)?);
    }
    if let Some(dir) = opts.checkpoint_dir {
        save(dir, &format!("{}_final", stage.name()), &params, &opt)?;
    }
    Ok(TrainingOutcome { params, optimizer: opt, log, steps: step, train_seconds: elapsed, stop })
}
