//! Fixed-step RK4 integration of the transport ODE together with its
//! log-density, augmented-adjoint and parameter-adjoint companions.
//!
//! Sign conventions. With `div = tr(dv/dx)`:
//!
//! * `forward_map` integrates `t: 0 -> 1` and reports `log_det = -int div dt`,
//!   so `log q(x1) = log q0(x0) + log_det`.
//! * `inverse_map` integrates the same ODE `t: 1 -> 0` and reports
//!   `log_det = +int div dt`, so `log q(x1) = log q0(x0) - log_det` and the two
//!   log-dets cancel along matched paths.
//!
//! Evaluation counting: every integrated ODE bundle costs `4 * n_steps` field
//! evaluations per sample. A bundle is one state block that is carried through
//! the RK4 stages (position, log-det, density gradient, adjoint). One
//! path-gradient batch integrates three bundles backwards (`x`, `grad log p`,
//! log-det) and two forwards (`x`, adjoint), which at 15 steps is
//! `5 * 60 = 300` evaluations per sample.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::SampleBatch;
use crate::error::{FlowError, Result};
use crate::rng::{stream_rng, Stream, StreamRng};
use crate::scalar::Real;
use crate::targets::EnergyModel;
use crate::vectorfield::{
    augmented_rates, field_with_divergence, vjp_accumulate, DivergenceMethod, FieldParams, ProbeVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `t: 0 -> 1`
    #[default]
    Forward,
    /// `t: 1 -> 0`
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    #[default]
    Exact,
    Hutchinson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub n_steps: usize,
    pub direction: Direction,
    pub divergence: DivergenceMode,
    /// Seed of the per-sample Rademacher probe streams.
    pub probe_seed: u64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Rk4,
            n_steps: 15,
            direction: Direction::Forward,
            divergence: DivergenceMode::Exact,
            probe_seed: 0,
        }
    }
}

impl IntegratorConfig {
    pub fn forward(n_steps: usize) -> Self {
        Self { n_steps, ..Self::default() }
    }

    pub fn inverse(n_steps: usize) -> Self {
        Self { n_steps, direction: Direction::Inverse, ..Self::default() }
    }

    pub fn with_direction(&self, direction: Direction) -> Self {
        Self { direction, ..self.clone() }
    }

    pub fn with_divergence(&self, divergence: DivergenceMode, probe_seed: u64) -> Self {
        Self { divergence, probe_seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(FlowError::Config("n_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Field evaluations per sample for one ODE bundle.
    pub fn evals_per_bundle(&self) -> usize {
        4 * self.n_steps
    }

    fn expect(&self, direction: Direction) -> Result<()> {
        self.validate()?;
        if self.direction != direction {
            return Err(FlowError::Config(format!("expected a {direction:?} integrator, got {:?}", self.direction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult<T> {
    pub x_end: SampleBatch<T>,
    pub log_det: Vec<T>,
    pub traj_length: Vec<T>,
    /// Field evaluations per sample and bundle.
    pub n_field_evals: usize,
    /// Number of ODE bundles integrated (position plus log-det: 2).
    pub bundles: usize,
}

impl<T: Real> FlowResult<T> {
    pub fn total_evals_per_sample(&self) -> usize {
        self.n_field_evals * self.bundles
    }
}

/// Result of pulling a target density gradient back to the base space.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedResult<T> {
    pub x0: SampleBatch<T>,
    /// `d log p_{0,theta} / dx0` at the pulled-back points.
    pub grad_log_p0: SampleBatch<T>,
    /// `+int div dt`, as for [`inverse_map`].
    pub log_det: Vec<T>,
    pub n_field_evals: usize,
    pub bundles: usize,
}

/// Parameter gradient returned by the continuous adjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient<T> {
    pub values: Vec<T>,
    pub n_field_evals: usize,
    pub bundles: usize,
}

// ---------------------------------------------------------------------------
// integrator core

/// Source of divergence estimators along one trajectory: exact, or a fresh
/// Rademacher probe per field evaluation from the sample's own stream.
struct Probes {
    rng: Option<StreamRng>,
    drawn: u64,
}

impl Probes {
    fn new(cfg: &IntegratorConfig, sample: usize) -> Self {
        let rng = match cfg.divergence {
            DivergenceMode::Exact => None,
            DivergenceMode::Hutchinson => Some(stream_rng(cfg.probe_seed, Stream::Probe, sample as u64)),
        };
        Self { rng, drawn: 0 }
    }

    fn exact() -> Self {
        Self { rng: None, drawn: 0 }
    }

    fn next<T: Real>(&mut self, dim: usize) -> DivergenceMethod<T> {
        match &mut self.rng {
            None => DivergenceMethod::Exact,
            Some(rng) => {
                self.drawn += 1;
                DivergenceMethod::Hutchinson(ProbeVector::draw(dim, rng, self.drawn))
            }
        }
    }
}

fn diverged(step: usize, t: f64, detail: impl Into<String>) -> FlowError {
    FlowError::IntegrationDiverged { step, t, detail: detail.into() }
}

/// Classic RK4 over `state`. `rate(y, t, w)` gets the quadrature weight `w` of
/// its stage (`h/6`, `h/3`, `h/3`, `h/6`, signed like `h`) so integrals of
/// side quantities can be accumulated without extra state. `on_step` sees the
/// state before and after each step.
fn rk4<T: Real>(
    state: &mut [T],
    n_steps: usize,
    backward: bool,
    mut rate: impl FnMut(&[T], T, T) -> Result<Vec<T>>,
    mut on_step: impl FnMut(&[T], &[T]),
) -> Result<()> {
    let n = n_steps as f64;
    let sign = if backward { -1.0 } else { 1.0 };
    let h = sign / n;
    let time = |k: usize, frac: f64| {
        let s = (k as f64 + frac) / n;
        if backward {
            1.0 - s
        } else {
            s
        }
    };
    let m = state.len();
    let mut tmp = vec![T::zero(); m];
    for step in 0..n_steps {
        let t0 = time(step, 0.0);
        let call = |rate: &mut dyn FnMut(&[T], T, T) -> Result<Vec<T>>, y: &[T], t: f64, w: f64| {
            if !y.iter().all(|v| v.is_finite()) {
                return Err(diverged(step, t, "non-finite stage state"));
            }
            match rate(y, T::lit(t), T::lit(w * h)) {
                Ok(r) if r.iter().all(|v| v.is_finite()) => Ok(r),
                Ok(_) => Err(diverged(step, t, "non-finite rate")),
                Err(FlowError::Domain(d)) => Err(diverged(step, t, d)),
                Err(e) => Err(e),
            }
        };
        let hh = T::lit(h);
        let half = T::lit(0.5 * h);
        let k1 = call(&mut rate, state, t0, 1.0 / 6.0)?;
        for i in 0..m {
            tmp[i] = state[i] + half * k1[i];
        }
        let k2 = call(&mut rate, &tmp, time(step, 0.5), 1.0 / 3.0)?;
        for i in 0..m {
            tmp[i] = state[i] + half * k2[i];
        }
        let k3 = call(&mut rate, &tmp, time(step, 0.5), 1.0 / 3.0)?;
        for i in 0..m {
            tmp[i] = state[i] + hh * k3[i];
        }
        let k4 = call(&mut rate, &tmp, time(step, 1.0), 1.0 / 6.0)?;
        let sixth = hh / T::lit(6.0);
        let two = T::lit(2.0);
        for i in 0..m {
            tmp[i] = state[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
        }
        if !tmp.iter().all(|v| v.is_finite()) {
            return Err(diverged(step, time(step, 1.0), "non-finite state"));
        }
        on_step(state, &tmp);
        state.copy_from_slice(&tmp);
    }
    Ok(())
}

fn check_batch<T: Real>(params: &FieldParams<T>, x: &SampleBatch<T>) -> Result<()> {
    if x.dim() != params.dim() {
        return Err(FlowError::Shape(format!(
            "batch of dimension {} for a field of dimension {}",
            x.dim(),
            params.dim()
        )));
    }
    Ok(())
}

fn step_length<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&p, &q)| (q - p) * (q - p)).sum::<T>().sqrt()
}

struct Path<T> {
    x: Vec<T>,
    log_det: T,
    length: T,
}

/// One trajectory of `(x, m)` with `dm/dt = -div`. With `with_div == false`
/// only `x` is integrated.
fn integrate_path<T: Real>(
    params: &FieldParams<T>,
    x: &[T],
    backward: bool,
    n_steps: usize,
    with_div: bool,
    mut probes: Probes,
) -> Result<Path<T>> {
    let d = x.len();
    let mut state = x.to_vec();
    state.push(T::zero());
    let mut length = T::zero();
    rk4(
        &mut state,
        n_steps,
        backward,
        |y, t, _| {
            if with_div {
                let (mut v, div) = field_with_divergence(params, &y[..d], t, &probes.next(d))?;
                v.push(-div);
                Ok(v)
            } else {
                let mut v = crate::vectorfield::eval_field(params, &y[..d], t)?;
                v.push(T::zero());
                Ok(v)
            }
        },
        |old, new| length += step_length(&old[..d], &new[..d]),
    )?;
    let log_det = state.pop().unwrap_or_else(T::zero);
    Ok(Path { x: state, log_det, length })
}

fn map_batch<T: Real>(params: &FieldParams<T>, x: &SampleBatch<T>, cfg: &IntegratorConfig, with_div: bool) -> Result<FlowResult<T>> {
    check_batch(params, x)?;
    let backward = cfg.direction == Direction::Inverse;
    let paths: Vec<Path<T>> = (0..x.len())
        .into_par_iter()
        .map(|i| integrate_path(params, x.row(i), backward, cfg.n_steps, with_div, Probes::new(cfg, i)))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(x.len() * x.dim());
    let mut log_det = Vec::with_capacity(x.len());
    let mut traj_length = Vec::with_capacity(x.len());
    for p in paths {
        data.extend(p.x);
        log_det.push(p.log_det);
        traj_length.push(p.length);
    }
    Ok(FlowResult {
        x_end: SampleBatch::new(x.dim(), data)?,
        log_det,
        traj_length,
        n_field_evals: cfg.evals_per_bundle(),
        bundles: if with_div { 2 } else { 1 },
    })
}

// ---------------------------------------------------------------------------
// public operations

/// Pushes base points through the flow, `t: 0 -> 1`.
pub fn forward_map<T: Real>(params: &FieldParams<T>, x0: &SampleBatch<T>, cfg: &IntegratorConfig) -> Result<FlowResult<T>> {
    cfg.expect(Direction::Forward)?;
    map_batch(params, x0, cfg, true)
}

/// Pulls target-space points back to the base, `t: 1 -> 0`.
pub fn inverse_map<T: Real>(params: &FieldParams<T>, x1: &SampleBatch<T>, cfg: &IntegratorConfig) -> Result<FlowResult<T>> {
    cfg.expect(Direction::Inverse)?;
    map_batch(params, x1, cfg, true)
}

/// `log q_theta(x1)` with the exact divergence, whatever `cfg` asks for.
pub fn log_prob<T: Real>(
    params: &FieldParams<T>,
    base: &EnergyModel,
    x1: &SampleBatch<T>,
    cfg: &IntegratorConfig,
) -> Result<Vec<T>> {
    let cfg = IntegratorConfig { direction: Direction::Inverse, divergence: DivergenceMode::Exact, ..cfg.clone() };
    let r = inverse_map(params, x1, &cfg)?;
    r.x_end
        .rows()
        .zip(&r.log_det)
        .map(|(x0, &ld)| Ok(base.log_prob_exact(x0)? - ld))
        .collect()
}

/// Draws `n` flow samples and their exact log-densities.
pub fn sample<T: Real>(
    params: &FieldParams<T>,
    base: &EnergyModel,
    n: usize,
    seed: u64,
    cfg: &IntegratorConfig,
) -> Result<(SampleBatch<T>, Vec<T>)> {
    let cfg = IntegratorConfig { direction: Direction::Forward, divergence: DivergenceMode::Exact, ..cfg.clone() };
    let x0 = base.sample_exact::<T>(n, seed)?;
    let r = forward_map(params, &x0, &cfg)?;
    let log_q = x0
        .rows()
        .zip(&r.log_det)
        .map(|(x, &ld)| Ok(base.log_prob_exact(x)? + ld))
        .collect::<Result<Vec<T>>>()?;
    Ok((r.x_end, log_q))
}

/// Polygonal length of each trajectory over the RK4 steps, and the batch
/// mean. Integrates in `cfg.direction`.
pub fn trajectory_length<T: Real>(params: &FieldParams<T>, x: &SampleBatch<T>, cfg: &IntegratorConfig) -> Result<(Vec<T>, T)> {
    cfg.validate()?;
    let r = map_batch(params, x, cfg, false)?;
    let mean = if r.traj_length.is_empty() {
        T::zero()
    } else {
        r.traj_length.iter().copied().sum::<T>() / T::lit(r.traj_length.len() as f64)
    };
    Ok((r.traj_length, mean))
}

/// Integrates `(x, grad log p, log-det)` from `t = 1` to `t = 0`, starting
/// from `grad log p1` at `x1`, and returns the pulled-back density gradient.
pub fn augmented_inverse<T: Real>(
    params: &FieldParams<T>,
    x1: &SampleBatch<T>,
    grad_log_p1: &SampleBatch<T>,
    cfg: &IntegratorConfig,
) -> Result<AugmentedResult<T>> {
    cfg.expect(Direction::Inverse)?;
    check_batch(params, x1)?;
    x1.check_same_shape(grad_log_p1, "target gradient")?;
    let d = x1.dim();
    let rows: Vec<(Vec<T>, T)> = (0..x1.len())
        .into_par_iter()
        .map(|i| {
            let mut probes = Probes::new(cfg, i);
            let mut state = Vec::with_capacity(2 * d + 1);
            state.extend_from_slice(x1.row(i));
            state.extend_from_slice(grad_log_p1.row(i));
            state.push(T::zero());
            rk4(
                &mut state,
                cfg.n_steps,
                true,
                |y, t, _| {
                    let r = augmented_rates(params, &y[..d], t, &y[d..2 * d], &probes.next(d))?;
                    let mut out = r.velocity;
                    out.extend(r.grad_rate);
                    out.push(-r.divergence);
                    Ok(out)
                },
                |_, _| {},
            )?;
            let ld = state.pop().unwrap_or_else(T::zero);
            Ok((state, ld))
        })
        .collect::<Result<_>>()?;
    let mut x0 = Vec::with_capacity(x1.len() * d);
    let mut g0 = Vec::with_capacity(x1.len() * d);
    let mut log_det = Vec::with_capacity(x1.len());
    for (s, ld) in rows {
        x0.extend_from_slice(&s[..d]);
        g0.extend_from_slice(&s[d..]);
        log_det.push(ld);
    }
    Ok(AugmentedResult {
        x0: SampleBatch::new(d, x0)?,
        grad_log_p0: SampleBatch::new(d, g0)?,
        log_det,
        n_field_evals: cfg.evals_per_bundle(),
        bundles: 3,
    })
}

/// Continuous-adjoint gradient of a loss `L(x0, log_det)` whose dependence on
/// the parameters runs through the inverse map `x0 = T^{-1}(x1)`, with
/// `log_det` the inverse-map log-det.
///
/// `d_x0` holds `dL/dx0` per sample and `d_log_det` (optional) `dL/dlog_det`;
/// both are treated as constants. The adjoint starts at `x0` and runs
/// `t: 0 -> 1`, re-integrating `x` alongside it. `cfg.direction` is ignored.
pub fn adjoint_param_grad<T: Real>(
    params: &FieldParams<T>,
    x0: &SampleBatch<T>,
    d_x0: &SampleBatch<T>,
    d_log_det: Option<&[T]>,
    cfg: &IntegratorConfig,
) -> Result<ParamGradient<T>> {
    cfg.validate()?;
    check_batch(params, x0)?;
    x0.check_same_shape(d_x0, "loss cotangent")?;
    if let Some(c) = d_log_det {
        if c.len() != x0.len() {
            return Err(FlowError::Shape("log-det cotangent length differs from the batch".into()));
        }
    }
    let d = x0.dim();
    let p = params.len();
    let per_sample: Vec<Vec<T>> = (0..x0.len())
        .into_par_iter()
        .map(|i| {
            let c_ld = d_log_det.map_or(T::zero(), |c| c[i]);
            let mut probes = if c_ld == T::zero() { Probes::exact() } else { Probes::new(cfg, i) };
            let mut theta = vec![T::zero(); p];
            if d_x0.row(i).iter().all(|v| *v == T::zero()) && c_ld == T::zero() {
                return Ok(theta);
            }
            let mut state = Vec::with_capacity(2 * d);
            state.extend_from_slice(x0.row(i));
            state.extend_from_slice(d_x0.row(i));
            // The log-det is carried as m with dm/dt = -div, m(1) = 0, so its
            // adjoint is the constant c_ld and enters as a -c_ld divergence
            // cotangent.
            rk4(
                &mut state,
                cfg.n_steps,
                false,
                |y, t, w| {
                    let method = probes.next(d);
                    let (v, dx) = vjp_accumulate(params, &y[..d], t, &y[d..], -c_ld, &method, &mut theta, -w)?;
                    let mut out = v;
                    out.extend(dx.into_iter().map(|g| -g));
                    Ok(out)
                },
                |_, _| {},
            )?;
            Ok(theta)
        })
        .collect::<Result<_>>()?;
    let mut values = vec![T::zero(); p];
    for g in per_sample {
        for (a, b) in values.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(ParamGradient { values, n_field_evals: cfg.evals_per_bundle(), bundles: 2 })
}
