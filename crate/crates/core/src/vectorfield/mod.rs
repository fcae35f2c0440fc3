//! The learned velocity field `v(x, t)` and its derivatives.
//!
//! The field is a fully connected network on the concatenated input
//! `[x, t]`. Besides plain evaluation, the module exposes every first and
//! second order quantity the flow integrators need: Jacobians, exact and
//! stochastic divergences, the spatial gradient of the divergence and
//! vector-Jacobian products with respect to inputs and parameters. All of
//! them are computed analytically by explicit layer passes.

mod checkpoint;
mod mlp;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Real;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_FORMAT_VERSION};

use mlp::{layer_shapes, LayerShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Elu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeEncoding {
    /// `t` is appended to `x` as one extra input.
    #[default]
    ConcatScalar,
}

/// Optional structural constraint on the field.
///
/// `MeanFree` treats `x` as `n` particles in `space_dim` dimensions, feeds the
/// network the centred configuration and removes the mean from its output, so
/// the flow never moves the centre of mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Symmetry {
    #[default]
    None,
    MeanFree { space_dim: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldArch {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub time_encoding: TimeEncoding,
    #[serde(default)]
    pub symmetry: Symmetry,
}

impl FieldArch {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_widths,
            activation,
            time_encoding: TimeEncoding::ConcatScalar,
            symmetry: Symmetry::None,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn with_symmetry(mut self, symmetry: Symmetry) -> Result<Self> {
        self.symmetry = symmetry;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(FlowError::Config("field input_dim must be positive".into()));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(FlowError::Config(
                "hidden_widths must be a non-empty list of positive widths".into(),
            ));
        }
        if let Symmetry::MeanFree { space_dim } = self.symmetry {
            if space_dim == 0 || self.input_dim % space_dim != 0 || self.input_dim / space_dim < 2 {
                return Err(FlowError::Config(format!(
                    "mean-free field needs input_dim ({}) to hold at least two particles of space_dim {space_dim}",
                    self.input_dim
                )));
            }
        }
        Ok(())
    }

    /// Weights plus biases over all layers `[D+1, widths..., D]`.
    pub fn parameter_count(&self) -> usize {
        layer_shapes(self).iter().map(LayerShape::n_params).sum()
    }

    /// Orthogonal projection applied to inputs and outputs of the network.
    pub fn project<T: Real>(&self, v: &mut [T]) {
        if let Symmetry::MeanFree { space_dim } = self.symmetry {
            let n = v.len() / space_dim;
            let inv_n = T::one() / T::lit(n as f64);
            for k in 0..space_dim {
                let mean = (0..n).map(|i| v[i * space_dim + k]).sum::<T>() * inv_n;
                for i in 0..n {
                    v[i * space_dim + k] -= mean;
                }
            }
        }
    }
}

/// Parameter snapshot for a [`FieldArch`]. Immutable; optimizers produce new
/// snapshots with an incremented `version`.
#[derive(Debug, Clone)]
pub struct FieldParams<T> {
    arch: FieldArch,
    values: Vec<T>,
    version: u64,
    shapes: Vec<LayerShape>,
}

impl<T> PartialEq for FieldParams<T>
where
    T: PartialEq,
{
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.values == other.values && self.version == other.version
    }
}

impl<T: Real> FieldParams<T> {
    pub fn from_values(arch: FieldArch, values: Vec<T>, version: u64) -> Result<Self> {
        arch.validate()?;
        let expected = arch.parameter_count();
        if values.len() != expected {
            return Err(FlowError::Shape(format!(
                "parameter vector has length {} but the architecture needs {expected}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(FlowError::Domain("non-finite parameter value".into()));
        }
        let shapes = layer_shapes(&arch);
        Ok(Self { arch, values, version, shapes })
    }

    pub fn zeros(arch: FieldArch) -> Result<Self> {
        let n = arch.parameter_count();
        Self::from_values(arch, vec![T::zero(); n], 0)
    }

    pub fn arch(&self) -> &FieldArch {
        &self.arch
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Next snapshot with new values; the version is bumped by one.
    pub fn with_values(&self, values: Vec<T>) -> Result<Self> {
        Self::from_values(self.arch.clone(), values, self.version + 1)
    }

    pub fn cast<U: Real>(&self) -> FieldParams<U> {
        FieldParams {
            arch: self.arch.clone(),
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
            version: self.version,
            shapes: self.shapes.clone(),
        }
    }
}

/// Draws fan-in scaled uniform weights: every weight and bias of a layer with
/// `n_in` inputs is `U(-1/sqrt(n_in), 1/sqrt(n_in))`. The output layer is then
/// multiplied by 0.01 so a fresh flow is close to the identity map.
pub fn init_params<T: Real>(arch: &FieldArch, seed: u64) -> Result<FieldParams<T>> {
    arch.validate()?;
    let shapes = layer_shapes(arch);
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let mut values = Vec::with_capacity(arch.parameter_count());
    for (l, s) in shapes.iter().enumerate() {
        let bound = 1.0 / (s.n_in as f64).sqrt();
        let scale = if l + 1 == shapes.len() { 0.01 } else { 1.0 };
        for _ in 0..s.n_params() {
            let u: f64 = rng.gen_range(-bound..bound);
            values.push(T::lit(u * scale));
        }
    }
    FieldParams::from_values(arch.clone(), values, 0)
}

/// Rademacher probe for the stochastic trace estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeVector<T> {
    values: Vec<T>,
    seed_tag: u64,
}

impl<T: Real> ProbeVector<T> {
    /// Fails unless every entry is exactly `+1` or `-1`.
    pub fn new(values: Vec<T>, seed_tag: u64) -> Result<Self> {
        if values.is_empty() || values.iter().any(|&v| v != T::one() && v != -T::one()) {
            return Err(FlowError::Domain("probe entries must all be +1 or -1".into()));
        }
        Ok(Self { values, seed_tag })
    }

    pub fn draw<R: Rng + ?Sized>(dim: usize, rng: &mut R, seed_tag: u64) -> Self {
        let values = (0..dim).map(|_| crate::rng::rademacher(rng)).collect();
        Self { values, seed_tag }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn seed_tag(&self) -> u64 {
        self.seed_tag
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DivergenceMethod<T> {
    /// Trace of the full Jacobian.
    Exact,
    /// `eps^T (dv/dx) eps` for the given probe.
    Hutchinson(ProbeVector<T>),
}

/// Output cotangents for [`vjp`].
#[derive(Debug, Clone)]
pub struct Cotangents<T> {
    pub d_velocity: Vec<T>,
    pub d_divergence: T,
}

#[derive(Debug, Clone)]
pub struct VjpResult<T> {
    pub d_x: Vec<T>,
    pub d_theta: Vec<T>,
}

/// Velocity, divergence and divergence-gradient rates of the augmented
/// dynamics at one point.
#[derive(Debug, Clone)]
pub(crate) struct AugmentedRates<T> {
    pub velocity: Vec<T>,
    pub divergence: T,
    /// `-(J^T g) - grad_x div`
    pub grad_rate: Vec<T>,
}

// ---------------------------------------------------------------------------
// internals

fn check_point<T: Real>(params: &FieldParams<T>, x: &[T], t: T) -> Result<()> {
    if x.len() != params.dim() {
        return Err(FlowError::Shape(format!(
            "point of dimension {} for a field of dimension {}",
            x.len(),
            params.dim()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(FlowError::Domain("non-finite input point".into()));
    }
    let slack = T::lit(1e-9);
    if !t.is_finite() || t < -slack || t > T::one() + slack {
        return Err(FlowError::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

fn check_method<T: Real>(params: &FieldParams<T>, method: &DivergenceMethod<T>) -> Result<()> {
    if let DivergenceMethod::Hutchinson(p) = method {
        if p.values.len() != params.dim() {
            return Err(FlowError::Shape(format!(
                "probe of dimension {} for a field of dimension {}",
                p.values.len(),
                params.dim()
            )));
        }
    }
    Ok(())
}

struct Pass<'a, T: Real> {
    params: &'a FieldParams<T>,
    tape: mlp::Tape<T>,
}

impl<'a, T: Real> Pass<'a, T> {
    fn new(params: &'a FieldParams<T>, x: &[T], t: T) -> Self {
        let mut input = x.to_vec();
        params.arch.project(&mut input);
        input.push(t);
        let tape = mlp::forward(&params.shapes, params.arch.activation, &params.values, input);
        Self { params, tape }
    }

    fn dim(&self) -> usize {
        self.params.dim()
    }

    fn velocity(&self) -> Vec<T> {
        let mut v = self.tape.out.clone();
        self.params.arch.project(&mut v);
        v
    }

    fn input_vec(&self, u: &[T]) -> Vec<T> {
        let mut v = u.to_vec();
        self.params.arch.project(&mut v);
        v.push(T::zero());
        v
    }

    fn project_input_cot(&self, mut c: Vec<T>) -> Vec<T> {
        c.truncate(self.dim());
        self.params.arch.project(&mut c);
        c
    }

    /// `J u`
    fn jvp(&self, u: &[T]) -> Vec<T> {
        let tan = mlp::tangent(&self.params.shapes, &self.params.values, &self.tape, self.input_vec(u));
        let mut out = tan.out;
        self.params.arch.project(&mut out);
        out
    }

    /// `J^T w`, adding `scale * (dv/dtheta)^T w` into `grad_theta`.
    fn vjp(&self, w: &[T], grad_theta: Option<(&mut [T], T)>) -> Vec<T> {
        let mut seed = w.to_vec();
        self.params.arch.project(&mut seed);
        let c = mlp::reverse(&self.params.shapes, &self.params.values, &self.tape, &seed, grad_theta);
        self.project_input_cot(c)
    }

    /// Second-order pass along direction `u` with seed `u`:
    /// returns `(u^T J u, J^T u, grad_x (u^T J u))` and adds
    /// `scale * grad_theta (u^T J u)` into `grad_theta`.
    fn quadratic(&self, u: &[T], grad_theta: Option<(&mut [T], T)>) -> (T, Vec<T>, Vec<T>) {
        let shapes = &self.params.shapes;
        let theta = &self.params.values;
        let tan = mlp::tangent(shapes, theta, &self.tape, self.input_vec(u));
        let mut jv = tan.out.clone();
        self.params.arch.project(&mut jv);
        let q = crate::scalar::dot(u, &jv);
        let mut seed = u.to_vec();
        self.params.arch.project(&mut seed);
        let (c, c_dot) = mlp::dual_reverse(shapes, theta, &self.tape, &tan, &seed, grad_theta);
        (q, self.project_input_cot(c), self.project_input_cot(c_dot))
    }

    fn basis(&self, k: usize) -> Vec<T> {
        let mut e = vec![T::zero(); self.dim()];
        e[k] = T::one();
        e
    }

    /// Directions whose quadratic forms sum to the divergence.
    fn directions(&self, method: &DivergenceMethod<T>) -> Vec<Vec<T>> {
        match method {
            DivergenceMethod::Exact => (0..self.dim()).map(|k| self.basis(k)).collect(),
            DivergenceMethod::Hutchinson(p) => vec![p.values.clone()],
        }
    }

    fn divergence(&self, method: &DivergenceMethod<T>) -> T {
        match method {
            DivergenceMethod::Exact => (0..self.dim()).map(|k| self.jvp(&self.basis(k))[k]).sum(),
            DivergenceMethod::Hutchinson(p) => crate::scalar::dot(&p.values, &self.jvp(&p.values)),
        }
    }
}

// ---------------------------------------------------------------------------
// public operations

pub fn eval_field<T: Real>(params: &FieldParams<T>, x: &[T], t: T) -> Result<Vec<T>> {
    check_point(params, x, t)?;
    Ok(Pass::new(params, x, t).velocity())
}

/// Row-major `D x D` Jacobian, entry `(i, j)` is `dv_i / dx_j`.
pub fn jacobian<T: Real>(params: &FieldParams<T>, x: &[T], t: T) -> Result<Vec<T>> {
    check_point(params, x, t)?;
    let pass = Pass::new(params, x, t);
    let d = params.dim();
    let mut jac = vec![T::zero(); d * d];
    for k in 0..d {
        let col = pass.jvp(&pass.basis(k));
        for i in 0..d {
            jac[i * d + k] = col[i];
        }
    }
    Ok(jac)
}

pub fn divergence<T: Real>(
    params: &FieldParams<T>,
    x: &[T],
    t: T,
    method: &DivergenceMethod<T>,
) -> Result<T> {
    check_point(params, x, t)?;
    check_method(params, method)?;
    Ok(Pass::new(params, x, t).divergence(method))
}

/// Spatial gradient of [`divergence`]. In Hutchinson mode the probe is held
/// fixed inside the differentiated expression.
///
/// With the ELU activation this is an almost-everywhere derivative: the
/// second derivative of ELU jumps at zero pre-activation.
pub fn grad_x_divergence<T: Real>(
    params: &FieldParams<T>,
    x: &[T],
    t: T,
    method: &DivergenceMethod<T>,
) -> Result<Vec<T>> {
    check_point(params, x, t)?;
    check_method(params, method)?;
    let pass = Pass::new(params, x, t);
    let mut g = vec![T::zero(); params.dim()];
    for u in pass.directions(method) {
        let (_, _, gd) = pass.quadratic(&u, None);
        for (a, b) in g.iter_mut().zip(gd) {
            *a += b;
        }
    }
    Ok(g)
}

/// Pulls output cotangents `(dL/dv, dL/ddiv)` back to `dL/dx` and `dL/dtheta`.
pub fn vjp<T: Real>(
    params: &FieldParams<T>,
    x: &[T],
    t: T,
    cot: &Cotangents<T>,
    method: &DivergenceMethod<T>,
) -> Result<VjpResult<T>> {
    let mut d_theta = vec![T::zero(); params.len()];
    let (_, d_x) = vjp_accumulate(params, x, t, &cot.d_velocity, cot.d_divergence, method, &mut d_theta, T::one())?;
    Ok(VjpResult { d_x, d_theta })
}

/// Like [`vjp`], but adds `theta_scale * dL/dtheta` into an existing buffer
/// and also returns the velocity. Returns `(v, dL/dx)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn vjp_accumulate<T: Real>(
    params: &FieldParams<T>,
    x: &[T],
    t: T,
    d_velocity: &[T],
    d_divergence: T,
    method: &DivergenceMethod<T>,
    theta_acc: &mut [T],
    theta_scale: T,
) -> Result<(Vec<T>, Vec<T>)> {
    check_point(params, x, t)?;
    check_method(params, method)?;
    if d_velocity.len() != params.dim() {
        return Err(FlowError::Shape("velocity cotangent has the wrong dimension".into()));
    }
    let pass = Pass::new(params, x, t);
    let mut d_x = pass.vjp(d_velocity, Some((&mut *theta_acc, theta_scale)));
    if d_divergence != T::zero() {
        for u in pass.directions(method) {
            let (_, _, gd) = pass.quadratic(&u, Some((&mut *theta_acc, theta_scale * d_divergence)));
            for (a, b) in d_x.iter_mut().zip(gd) {
                *a += d_divergence * b;
            }
        }
    }
    Ok((pass.velocity(), d_x))
}

/// Evaluates `v`, builds the velocity cotangent from it with `seed`, and adds
/// `theta_scale * (dv^T seed)/dtheta` into `theta_acc`. Returns `v`.
pub(crate) fn pullback_from_velocity<T: Real>(
    params: &FieldParams<T>,
    x: &[T],
    t: T,
    seed: impl FnOnce(&[T]) -> Vec<T>,
    theta_acc: &mut [T],
    theta_scale: T,
) -> Result<Vec<T>> {
    check_point(params, x, t)?;
    let pass = Pass::new(params, x, t);
    let v = pass.velocity();
    let dv = seed(&v);
    pass.vjp(&dv, Some((theta_acc, theta_scale)));
    Ok(v)
}

pub(crate) fn field_with_divergence<T: Real>(
    params: &FieldParams<T>,
    x: &[T],
    t: T,
    method: &DivergenceMethod<T>,
) -> Result<(Vec<T>, T)> {
    check_point(params, x, t)?;
    check_method(params, method)?;
    let pass = Pass::new(params, x, t);
    Ok((pass.velocity(), pass.divergence(method)))
}

/// Rates of the augmented state `(x, grad log p, log-det)` at one point:
/// `dx/dt = v`, `dg/dt = -(J^T g) - grad_x div`, and the divergence.
pub(crate) fn augmented_rates<T: Real>(
    params: &FieldParams<T>,
    x: &[T],
    t: T,
    g: &[T],
    method: &DivergenceMethod<T>,
) -> Result<AugmentedRates<T>> {
    check_point(params, x, t)?;
    check_method(params, method)?;
    let pass = Pass::new(params, x, t);
    let d = params.dim();
    let mut grad_rate = vec![T::zero(); d];
    let mut div = T::zero();
    match method {
        DivergenceMethod::Exact => {
            // Row k of J comes out of the k-th second-order pass for free.
            for k in 0..d {
                let (q, jt_ek, gd) = pass.quadratic(&pass.basis(k), None);
                div += q;
                for i in 0..d {
                    grad_rate[i] -= g[k] * jt_ek[i] + gd[i];
                }
            }
        }
        DivergenceMethod::Hutchinson(p) => {
            let (q, _, gd) = pass.quadratic(&p.values, None);
            div = q;
            let jt_g = pass.vjp(g, None);
            for i in 0..d {
                grad_rate[i] = -jt_g[i] - gd[i];
            }
        }
    }
    Ok(AugmentedRates { velocity: pass.velocity(), divergence: div, grad_rate })
}

/// Exactly affine field `v(x, t) = A x + c`, written as an ELU network with a
/// single hidden layer of width `D` kept in the linear regime.
///
/// The hidden layer computes `elu(x + shift)`, which is `x + shift` as long as
/// every coordinate stays above `-shift`; the output layer removes the shift
/// again. `matrix` is row-major `D x D`.
pub fn affine_field<T: Real>(matrix: &[f64], offset: &[f64], shift: f64) -> Result<FieldParams<T>> {
    let d = offset.len();
    if matrix.len() != d * d {
        return Err(FlowError::Shape("affine field matrix must be D x D".into()));
    }
    let arch = FieldArch::new(d, vec![d], Activation::Elu)?;
    let mut values = Vec::with_capacity(arch.parameter_count());
    // hidden: weights [I | 0] (D x (D+1)), biases = shift
    for i in 0..d {
        for j in 0..=d {
            values.push(if i == j { 1.0 } else { 0.0 });
        }
    }
    values.extend(std::iter::repeat(shift).take(d));
    // output: weights A, biases c - A * shift
    values.extend_from_slice(matrix);
    for i in 0..d {
        let row_sum: f64 = matrix[i * d..(i + 1) * d].iter().sum();
        values.push(offset[i] - row_sum * shift);
    }
    FieldParams::from_values(arch, values.into_iter().map(T::lit).collect(), 0)
}

#[cfg(test)]
mod tests;
