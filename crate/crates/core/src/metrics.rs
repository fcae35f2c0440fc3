//! Importance-sampling diagnostics for a trained flow against a target.
//!
//! Log-weights are `log w = -U(x) - log q(x)`, so for an unnormalized target
//! `w` carries the unknown `Z`. Every reduction runs in log space.

use serde::{Deserialize, Serialize};

use crate::batch::SampleBatch;
use crate::cnf::{forward_map, log_prob, IntegratorConfig};
use crate::error::{FlowError, Result};
use crate::scalar::{log_sum_exp, Real};
use crate::targets::EnergyModel;
use crate::vectorfield::FieldParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    ModelSamples,
    TargetSamples,
}

/// Log importance weights of one sample set.
///
/// Entries are finite or `-inf`; the latter marks a zero weight, which is
/// what a configuration with infinite energy (overlapping particles) gets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet<T> {
    pub log_w: Vec<T>,
    pub origin: Origin,
}

impl<T: Real> WeightSet<T> {
    pub fn new(log_w: Vec<T>, origin: Origin) -> Result<Self> {
        if log_w.iter().any(|v| v.is_nan() || *v == T::infinity()) {
            return Err(FlowError::DegenerateWeights("log-weights must be finite or -inf".into()));
        }
        Ok(Self { log_w, origin })
    }

    pub fn len(&self) -> usize {
        self.log_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_w.is_empty()
    }

    fn expect(&self, origin: Origin) -> Result<()> {
        if self.origin != origin {
            return Err(FlowError::Domain(format!("estimator needs {origin:?} weights, got {:?}", self.origin)));
        }
        if self.log_w.is_empty() {
            return Err(FlowError::DegenerateWeights("no weights".into()));
        }
        Ok(())
    }

    fn log_n(&self) -> T {
        T::lit((self.log_w.len() as f64).ln())
    }
}

pub fn importance_weights<T: Real>(
    target: &EnergyModel,
    log_q: &[T],
    x: &SampleBatch<T>,
    origin: Origin,
) -> Result<WeightSet<T>> {
    if log_q.len() != x.len() {
        return Err(FlowError::Shape(format!("{} log-densities for {} samples", log_q.len(), x.len())));
    }
    let log_w = x
        .rows()
        .zip(log_q)
        .map(|(r, &lq)| match target.energy(r) {
            Ok(u) if u == T::infinity() => Ok(T::neg_infinity()),
            Ok(u) => Ok(-u - lq),
            Err(FlowError::SingularConfiguration { .. }) => Ok(T::neg_infinity()),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<T>>>()?;
    WeightSet::new(log_w, origin)
}

/// `(sum w)^2 / (N sum w^2)` over model samples.
pub fn ess_q<T: Real>(w: &WeightSet<T>) -> Result<T> {
    w.expect(Origin::ModelSamples)?;
    let lse = log_sum_exp(&w.log_w);
    if lse == T::neg_infinity() {
        return Err(FlowError::DegenerateWeights("all weights are zero".into()));
    }
    let doubled: Vec<T> = w.log_w.iter().map(|&v| v + v).collect();
    let ess = (lse + lse - log_sum_exp(&doubled) - w.log_n()).exp();
    Ok(ess.min(T::one()))
}

/// `1 / (mean_p[w] mean_p[1/w])` over target samples; the `1/w` factor
/// supplies the unknown normalizer.
pub fn ess_p<T: Real>(w: &WeightSet<T>) -> Result<T> {
    w.expect(Origin::TargetSamples)?;
    let inv: Vec<T> = w.log_w.iter().map(|&v| -v).collect();
    let log_prod = log_sum_exp(&w.log_w) - w.log_n() + log_sum_exp(&inv) - w.log_n();
    Ok((-log_prod).exp().min(T::one()))
}

/// Self-normalized estimate of `E_p[obs]` from model samples.
pub fn expectation_under_p<T: Real>(w: &WeightSet<T>, obs: &[T]) -> Result<T> {
    w.expect(Origin::ModelSamples)?;
    if obs.len() != w.len() {
        return Err(FlowError::Shape("observable and weights differ in length".into()));
    }
    let m = w.log_w.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return Err(FlowError::DegenerateWeights("all weights are zero".into()));
    }
    let mut num = T::zero();
    let mut den = T::zero();
    for (&lw, &o) in w.log_w.iter().zip(obs) {
        let wi = (lw - m).exp();
        num += wi * o;
        den += wi;
    }
    Ok(num / den)
}

/// Estimate of `log Z` from model samples with its jackknife standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogZEstimate {
    pub value: f64,
    pub std_err: f64,
}

pub fn log_z_hat<T: Real>(w: &WeightSet<T>) -> Result<LogZEstimate> {
    w.expect(Origin::ModelSamples)?;
    let lw: Vec<f64> = w.log_w.iter().map(|v| v.as_f64()).collect();
    let n = lw.len();
    let value = log_sum_exp(&lw) - (n as f64).ln();
    if !value.is_finite() {
        return Err(FlowError::DegenerateWeights("all weights are zero".into()));
    }
    if n < 2 {
        return Ok(LogZEstimate { value, std_err: f64::NAN });
    }
    let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = lw.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = scaled.iter().sum();
    let log_rest = (n as f64 - 1.0).ln();
    let loo: Vec<f64> = (0..n)
        .map(|i| {
            let rest = total - scaled[i];
            if rest > 1e-8 * total {
                m + rest.ln() - log_rest
            } else {
                // cancellation: recompute without sample i
                let others: Vec<f64> = lw.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).collect();
                log_sum_exp(&others) - log_rest
            }
        })
        .collect();
    let mean = loo.iter().sum::<f64>() / n as f64;
    let var = loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (n as f64 - 1.0) / n as f64;
    Ok(LogZEstimate { value, std_err: var.sqrt() })
}

/// Evaluation-time integrator: exact divergence, 30 steps.
pub fn eval_integrator() -> IntegratorConfig {
    IntegratorConfig::forward(30)
}

/// `-mean log q(x)` over a test set, always with the exact divergence.
pub fn nll<T: Real>(
    params: &FieldParams<T>,
    base: &EnergyModel,
    test: &SampleBatch<T>,
    cfg: &IntegratorConfig,
) -> Result<T> {
    let lq = log_prob(params, base, test, cfg)?;
    mean(&lq).map(|m| -m)
}

/// `mean(log p - log q)` over target samples; needs a normalized target.
pub fn forward_kl<T: Real>(
    params: &FieldParams<T>,
    base: &EnergyModel,
    target: &EnergyModel,
    test: &SampleBatch<T>,
    cfg: &IntegratorConfig,
) -> Result<T> {
    if !target.is_normalized() {
        return Err(FlowError::Unsupported(format!("forward KL needs a normalized target, got {}", target.name())));
    }
    let lq = log_prob(params, base, test, cfg)?;
    forward_kl_from(target, test, &lq)
}

fn forward_kl_from<T: Real>(target: &EnergyModel, test: &SampleBatch<T>, lq: &[T]) -> Result<T> {
    let terms = test
        .rows()
        .zip(lq)
        .map(|(r, &q)| Ok(target.log_prob_exact(r)? - q))
        .collect::<Result<Vec<T>>>()?;
    mean(&terms)
}

fn mean<T: Real>(v: &[T]) -> Result<T> {
    if v.is_empty() {
        return Err(FlowError::Shape("empty sample set".into()));
    }
    Ok(v.iter().copied().sum::<T>() / T::lit(v.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nll: f64,
    pub ess_q: f64,
    pub ess_p: f64,
    pub log_z_hat: f64,
    pub log_z_std_err: f64,
    pub fwd_kl: Option<f64>,
    pub traj_len_mean: f64,
    pub n_model_samples: usize,
    pub n_test_samples: usize,
}

/// Report plus the raw log-weights it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation<T> {
    pub report: MetricsReport,
    pub model_weights: WeightSet<T>,
    pub target_weights: WeightSet<T>,
    /// The flow samples behind `model_weights`, in the same order.
    pub model_samples: SampleBatch<T>,
}

/// Full evaluation: `n_model` flow samples drawn with `seed` give ESS_q,
/// log Z and the trajectory length; the test set gives NLL, ESS_p and, for
/// normalized targets, the forward KL.
pub fn evaluate<T: Real>(
    params: &FieldParams<T>,
    base: &EnergyModel,
    target: &EnergyModel,
    test: &SampleBatch<T>,
    n_model: usize,
    seed: u64,
    cfg: &IntegratorConfig,
) -> Result<Evaluation<T>> {
    let fwd = IntegratorConfig::forward(cfg.n_steps);
    let x0 = base.sample_exact::<T>(n_model, seed)?;
    let flowed = forward_map(params, &x0, &fwd)?;
    let lq_model = x0
        .rows()
        .zip(&flowed.log_det)
        .map(|(x, &ld)| Ok(base.log_prob_exact(x)? + ld))
        .collect::<Result<Vec<T>>>()?;
    let model_weights = importance_weights(target, &lq_model, &flowed.x_end, Origin::ModelSamples)?;

    let lq_test = log_prob(params, base, test, &fwd)?;
    let target_weights = importance_weights(target, &lq_test, test, Origin::TargetSamples)?;
    let fwd_kl = if target.is_normalized() { Some(forward_kl_from(target, test, &lq_test)?.as_f64()) } else { None };
    let log_z = log_z_hat(&model_weights)?;
    let report = MetricsReport {
        nll: -mean(&lq_test)?.as_f64(),
        ess_q: ess_q(&model_weights)?.as_f64(),
        ess_p: ess_p(&target_weights)?.as_f64(),
        log_z_hat: log_z.value,
        log_z_std_err: log_z.std_err,
        fwd_kl,
        traj_len_mean: mean(&flowed.traj_length)?.as_f64(),
        n_model_samples: n_model,
        n_test_samples: test.len(),
    };
    Ok(Evaluation { report, model_weights, target_weights, model_samples: flowed.x_end })
}
