//! Gradient estimators (flow matching, maximum likelihood, path gradients),
//! the Adam optimizer and the staged training loop.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::SampleBatch;
use crate::cnf::{adjoint_param_grad, augmented_inverse, inverse_map, DivergenceMode, IntegratorConfig};
use crate::error::{FlowError, Result};
use crate::rng::{normal, stream_rng, Stream};
use crate::scalar::Real;
use crate::targets::EnergyModel;
use crate::vectorfield::{pullback_from_velocity, FieldParams};

mod assign;
mod optim;
mod run;

pub use assign::{coupling_cost, ot_pair, MAX_OT_BATCH};
pub use optim::{adam_step, clip_and_accumulate, grad_norm, OptimizerState};
pub use run::{
    load_checkpoint, read_optimizer_state, run_training, write_log_csv, write_optimizer_state, EvalHook, EvalRecord, LogRow,
    RunOptions, StopReason, TrainingOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CfmStandard,
    CfmOt,
    Ml,
    Pg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FmPretrain,
    PgFinetune,
    MlFinetune,
    FmFinetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::FmPretrain => "fm_pretrain",
            Stage::PgFinetune => "pg_finetune",
            Stage::MlFinetune => "ml_finetune",
            Stage::FmFinetune => "fm_finetune",
        }
    }

    fn accepts(self, loss: Loss) -> bool {
        match self {
            Stage::FmPretrain | Stage::FmFinetune => matches!(loss, Loss::CfmStandard | Loss::CfmOt),
            Stage::PgFinetune => loss == Loss::Pg,
            Stage::MlFinetune => loss == Loss::Ml,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    Independent,
    Ot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: Loss,
    pub batch_size: usize,
    pub lr: f64,
    /// Standard deviation of the conditional probability path.
    pub sigma: f64,
    pub epochs: usize,
    pub grad_clip_norm: Option<f64>,
    pub accumulation_steps: usize,
    pub seed: u64,
    pub integrator: IntegratorConfig,
    /// Evaluate every this many optimizer steps (0: only at the end).
    pub eval_every: usize,
    /// Wall-clock budget in seconds; replaces `epochs` when set.
    pub budget_seconds: Option<f64>,
    /// Evaluation cadence in budget mode.
    pub eval_every_seconds: Option<f64>,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: Loss::CfmStandard,
            batch_size: 256,
            lr: 1e-2,
            sigma: 1e-2,
            epochs: 1,
            grad_clip_norm: None,
            accumulation_steps: 1,
            seed: 0,
            integrator: IntegratorConfig::default(),
            eval_every: 0,
            budget_seconds: None,
            eval_every_seconds: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FlowError::Config(m.into()));
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 {
            return bad("batch_size and accumulation_steps must be at least 1");
        }
        if self.batch_size % self.accumulation_steps != 0 {
            return bad("batch_size must be divisible by accumulation_steps");
        }
        if self.grad_clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip_norm must be positive");
        }
        if self.budget_seconds.is_some_and(|b| !(b >= 0.0)) {
            return bad("budget_seconds must be non-negative");
        }
        self.integrator.validate()
    }
}

/// Exact divergence up to 16 dimensions, Hutchinson above.
pub fn default_divergence(dim: usize) -> DivergenceMode {
    if dim <= 16 {
        DivergenceMode::Exact
    } else {
        DivergenceMode::Hutchinson
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Fm,
    Ml,
    Pg,
}

/// Parameter-shaped gradient and the batch loss it came with (where the
/// estimator has one).
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate<T> {
    pub values: Vec<T>,
    pub estimator: Estimator,
    pub batch_size: usize,
    pub aux: Option<f64>,
}

// Per-sample gradient work is summed in fixed chunks so the result does not
// depend on the thread schedule.
const CHUNK: usize = 16;

fn chunked_sum<T: Real>(
    n: usize,
    p: usize,
    work: impl Fn(usize, &mut [T]) -> Result<T> + Sync,
) -> Result<(Vec<T>, T)> {
    let parts: Vec<(Vec<T>, T)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![T::zero(); p];
            let mut side = T::zero();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                side += work(i, &mut acc)?;
            }
            Ok((acc, side))
        })
        .collect::<Result<_>>()?;
    let mut total = vec![T::zero(); p];
    let mut side = T::zero();
    for (acc, s) in parts {
        for (a, b) in total.iter_mut().zip(acc) {
            *a += b;
        }
        side += s;
    }
    Ok((total, side))
}

struct CfmPoint<T> {
    x: Vec<T>,
    t: T,
    u: Vec<T>,
}

fn cfm_points<T: Real>(
    params: &FieldParams<T>,
    x0: &SampleBatch<T>,
    x1: &SampleBatch<T>,
    coupling: Coupling,
    sigma: f64,
    seed: u64,
) -> Result<Vec<CfmPoint<T>>> {
    x0.check_same_shape(x1, "flow-matching batch")?;
    if x0.dim() != params.dim() {
        return Err(FlowError::Shape("flow-matching batch does not match the field dimension".into()));
    }
    let perm: Vec<usize> = match coupling {
        Coupling::Independent => (0..x0.len()).collect(),
        Coupling::Ot => ot_pair(x0, x1)?,
    };
    let d = x0.dim();
    let mut rng = stream_rng(seed, Stream::FlowMatching, 0);
    let s = T::lit(sigma);
    Ok((0..x0.len())
        .map(|i| {
            let (a, b) = (x0.row(i), x1.row(perm[i]));
            let t = T::lit(rng.gen::<f64>());
            let mut noise: Vec<T> = (0..d).map(|_| normal::<T, _>(&mut rng)).collect();
            params.arch().project(&mut noise);
            let x = (0..d).map(|k| t * b[k] + (T::one() - t) * a[k] + s * noise[k]).collect();
            let u = (0..d).map(|k| b[k] - a[k]).collect();
            CfmPoint { x, t, u }
        })
        .collect())
}

/// Conditional flow-matching loss `mean |v(x_t, t) - (x1 - x0)|^2` with
/// `t ~ U(0,1)`, `x_t ~ N(t x1 + (1-t) x0, sigma^2)`, and its gradient.
pub fn cfm_loss_grad<T: Real>(
    params: &FieldParams<T>,
    x0: &SampleBatch<T>,
    x1: &SampleBatch<T>,
    coupling: Coupling,
    sigma: f64,
    seed: u64,
) -> Result<GradEstimate<T>> {
    let pts = cfm_points(params, x0, x1, coupling, sigma, seed)?;
    let n = pts.len();
    let scale = T::lit(2.0 / n.max(1) as f64);
    let (values, sq) = chunked_sum(n, params.len(), |i, acc| {
        let pt = &pts[i];
        let mut sq = T::zero();
        pullback_from_velocity(
            params,
            &pt.x,
            pt.t,
            |v| {
                let r: Vec<T> = v.iter().zip(&pt.u).map(|(&a, &b)| a - b).collect();
                sq = r.iter().map(|&e| e * e).sum();
                r
            },
            acc,
            scale,
        )?;
        Ok(sq)
    })?;
    Ok(GradEstimate {
        values,
        estimator: Estimator::Fm,
        batch_size: n,
        aux: Some(if n == 0 { 0.0 } else { sq.as_f64() / n as f64 }),
    })
}

/// Value of the flow-matching loss alone, e.g. on a fixed validation draw.
pub fn cfm_loss<T: Real>(
    params: &FieldParams<T>,
    x0: &SampleBatch<T>,
    x1: &SampleBatch<T>,
    coupling: Coupling,
    sigma: f64,
    seed: u64,
) -> Result<f64> {
    let pts = cfm_points(params, x0, x1, coupling, sigma, seed)?;
    let sq = pts
        .par_iter()
        .map(|pt| {
            let v = crate::vectorfield::eval_field(params, &pt.x, pt.t)?;
            Ok(v.iter().zip(&pt.u).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sq.iter().sum::<f64>() / pts.len().max(1) as f64)
}

/// Flow-matching gradient for a field that is a single shared constant
/// `v = theta` in every coordinate, with the loss averaged over dimensions:
/// `G = 2/(N D) sum_i sum_d (theta + x0_id - x1_id)`. No time or path noise.
pub fn cfm_toy_grad(theta: f64, x0: &SampleBatch<f64>, x1: &SampleBatch<f64>) -> Result<f64> {
    x0.check_same_shape(x1, "toy batch")?;
    let nd = x0.as_slice().len() as f64;
    let s: f64 = x0.as_slice().iter().zip(x1.as_slice()).map(|(a, b)| theta + a - b).sum();
    Ok(2.0 * s / nd)
}

/// Maximum-likelihood gradient `-(1/N) sum d/dtheta log q(x1)`, through the
/// inverse map and the continuous adjoint. `aux` is the batch NLL.
pub fn ml_grad<T: Real>(
    params: &FieldParams<T>,
    base: &EnergyModel,
    x1: &SampleBatch<T>,
    cfg: &IntegratorConfig,
) -> Result<GradEstimate<T>> {
    let inv = inverse_map(params, x1, &cfg.with_direction(crate::cnf::Direction::Inverse))?;
    let n = x1.len();
    let inv_n = T::lit(1.0 / n.max(1) as f64);
    let x0 = inv.x_end;
    // L = -(1/N) sum [log q0(x0) - log_det]
    let mut d_x0 = Vec::with_capacity(x0.as_slice().len());
    let mut nll = 0.0;
    for (r, &ld) in x0.rows().zip(&inv.log_det) {
        d_x0.extend(base.force(r)?.into_iter().map(|f| -f * inv_n));
        nll -= (base.log_prob_exact(r)? - ld).as_f64();
    }
    let d_x0 = SampleBatch::new(x0.dim(), d_x0)?;
    let d_ld = vec![inv_n; n];
    let g = adjoint_param_grad(params, &x0, &d_x0, Some(&d_ld), cfg)?;
    Ok(GradEstimate { values: g.values, estimator: Estimator::Ml, batch_size: n, aux: Some(nll / n.max(1) as f64) })
}

/// Path-gradient estimator of the forward KL. `forces` are the target's
/// `grad log p` at `x1` (computed here when absent); the target's
/// normalization never enters. `aux` is the batch NLL.
pub fn pg_grad<T: Real>(
    params: &FieldParams<T>,
    base: &EnergyModel,
    target: &EnergyModel,
    x1: &SampleBatch<T>,
    forces: Option<&SampleBatch<T>>,
    cfg: &IntegratorConfig,
) -> Result<GradEstimate<T>> {
    let computed;
    let g1 = match forces {
        Some(f) => f,
        None => {
            computed = target.forces(x1)?;
            &computed
        }
    };
    let aug = augmented_inverse(params, x1, g1, &cfg.with_direction(crate::cnf::Direction::Inverse))?;
    let n = x1.len();
    let inv_n = T::lit(1.0 / n.max(1) as f64);
    let mut c = Vec::with_capacity(aug.x0.as_slice().len());
    let mut nll = 0.0;
    for ((x0, g0), &ld) in aug.x0.rows().zip(aug.grad_log_p0.rows()).zip(&aug.log_det) {
        let f0 = base.force(x0)?;
        c.extend(g0.iter().zip(f0).map(|(&a, b)| (a - b) * inv_n));
        nll -= (base.log_prob_exact(x0)? - ld).as_f64();
    }
    let c = SampleBatch::new(aug.x0.dim(), c)?;
    let g = adjoint_param_grad(params, &aug.x0, &c, None, cfg)?;
    Ok(GradEstimate { values: g.values, estimator: Estimator::Pg, batch_size: n, aux: Some(nll / n.max(1) as f64) })
}
