//! Gradient-estimator variance in the analytic toy family: base and target
//! both `N(0, I_D)` and a flow whose field is one scalar `theta` shared by
//! every coordinate, `v = theta * 1`. At `theta = 0` the flow is exact.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::SampleBatch;
use crate::cnf::IntegratorConfig;
use crate::error::{FlowError, Result};
use crate::rng::{derive_seed, Stream};
use crate::targets::EnergyModel;
use crate::train::{cfm_toy_grad, pg_grad};
use crate::vectorfield::{Activation, FieldArch, FieldParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n: usize,
    pub d: usize,
    pub trials: usize,
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ToyConfig {
    pub fn new(n: usize, d: usize, trials: usize) -> Self {
        Self { n, d, trials, theta: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.trials == 0 {
            return Err(FlowError::Config("N, D and trials must all be at least 1".into()));
        }
        Ok(())
    }

    fn batch(&self, trial: usize, which: u64) -> Result<SampleBatch<f64>> {
        let seed = derive_seed(self.seed, Stream::VarianceLab, 2 * trial as u64 + which);
        EnergyModel::StandardNormal { dim: self.d }.sample_exact(self.n, seed)
    }
}

/// Sample statistics of a scalar estimator over independent trials, with
/// the closed-form variance where one exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub estimator: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub trials: usize,
    pub mean: f64,
    pub var: f64,
    pub closed_form: Option<f64>,
    pub rel_err: Option<f64>,
}

impl VarianceRow {
    fn new(estimator: &str, cfg: &ToyConfig, samples: &[f64], closed_form: Option<f64>) -> Self {
        let (mean, var) = mean_var(samples);
        Self {
            estimator: estimator.into(),
            n: cfg.n,
            d: cfg.d,
            trials: cfg.trials,
            mean,
            var,
            closed_form,
            rel_err: closed_form.map(|c| (var - c).abs() / c),
        }
    }

    /// Standard error of `mean`.
    pub fn mean_std_err(&self) -> f64 {
        (self.var / self.trials as f64).sqrt()
    }
}

pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

fn per_trial<R: Send>(cfg: &ToyConfig, f: impl Fn(usize) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    cfg.validate()?;
    (0..cfg.trials).into_par_iter().map(f).collect()
}

/// Flow-matching gradients without time or path noise; closed form
/// `Var = 8 / (N D)` for independent standard normal batches.
pub fn toy_fm_variance(cfg: &ToyConfig) -> Result<VarianceRow> {
    let g = per_trial(cfg, |k| cfm_toy_grad(cfg.theta, &cfg.batch(k, 0)?, &cfg.batch(k, 1)?))?;
    Ok(VarianceRow::new("fm", cfg, &g, Some(8.0 / (cfg.n * cfg.d) as f64)))
}

/// Maximum-likelihood gradient of the shift family,
/// `G = -(1/N) sum_i sum_d (x1_id - theta)`; closed form `Var = D / N`.
pub fn toy_ml_variance(cfg: &ToyConfig) -> Result<VarianceRow> {
    let g = per_trial(cfg, |k| {
        let x1 = cfg.batch(k, 1)?;
        Ok(-x1.as_slice().iter().map(|x| x - cfg.theta).sum::<f64>() / cfg.n as f64)
    })?;
    Ok(VarianceRow::new("ml", cfg, &g, Some(cfg.d as f64 / cfg.n as f64)))
}

/// The toy field as an MLP: zero weights everywhere and `theta` in every
/// output bias, so `dL/dtheta` is the sum of the output-bias gradients.
pub fn constant_field(d: usize, theta: f64) -> Result<FieldParams<f64>> {
    let arch = FieldArch::new(d, vec![1], Activation::Tanh)?;
    let mut values = vec![0.0; arch.parameter_count()];
    let n = values.len();
    values[n - d..].iter_mut().for_each(|v| *v = theta);
    FieldParams::from_values(arch, values, 0)
}

/// Path gradients of the toy family computed through the full engine
/// (augmented adjoint and continuous adjoint).
#[derive(Debug, Clone, PartialEq)]
pub struct PgToyResult {
    pub row: VarianceRow,
    /// Largest `|G|` over trials and over every parameter component.
    pub max_abs: f64,
}

pub fn toy_pg_at_optimum(cfg: &ToyConfig) -> Result<PgToyResult> {
    let params = constant_field(cfg.d, cfg.theta)?;
    let model = EnergyModel::StandardNormal { dim: cfg.d };
    let integrator = IntegratorConfig::default();
    let d = cfg.d;
    let pairs = per_trial(cfg, |k| {
        let g = pg_grad(&params, &model, &model, &cfg.batch(k, 1)?, None, &integrator)?;
        let max = g.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let n = g.values.len();
        Ok((g.values[n - d..].iter().sum::<f64>(), max))
    })?;
    let theta_grads: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let max_abs = pairs.iter().fold(0.0f64, |m, p| m.max(p.1));
    let closed = if cfg.theta == 0.0 { Some(0.0) } else { None };
    let mut row = VarianceRow::new("pg", cfg, &theta_grads, closed);
    if closed.is_some() {
        row.rel_err = None;
    }
    Ok(PgToyResult { row, max_abs })
}

pub fn write_variance_csv<W: Write>(rows: &[VarianceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| FlowError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
