#![allow(dead_code)]

use flowpg_core::batch::SampleBatch;
use flowpg_core::rng::{fill_normal, stream_rng, Stream};
use flowpg_core::targets::EnergyModel;
use flowpg_core::vectorfield::{
    divergence, eval_field, vjp, Activation, Cotangents, DivergenceMethod, FieldArch, FieldParams,
};

/// Tanh MLP with i.i.d. `N(0, std^2)` parameters; strong enough to bend paths.
pub fn wiggly_field(d: usize, widths: Vec<usize>, seed: u64, std: f64) -> FieldParams<f64> {
    let arch = FieldArch::new(d, widths, Activation::Tanh).unwrap();
    let mut rng = stream_rng(seed, Stream::Init, 77);
    let mut v = vec![0.0; arch.parameter_count()];
    fill_normal(&mut rng, &mut v);
    FieldParams::from_values(arch, v.into_iter().map(|x| x * std).collect(), 0).unwrap()
}

pub fn normal_batch(n: usize, d: usize, seed: u64) -> SampleBatch<f64> {
    EnergyModel::StandardNormal { dim: d }.sample_exact(n, seed).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

pub fn rel_err(a: &[f64], reference: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(reference).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(reference)
}

/// Rates `(v, -div)` of the state `(x, m)`.
fn rates(p: &FieldParams<f64>, y: &[f64], t: f64) -> Vec<f64> {
    let d = p.dim();
    let mut r = eval_field(p, &y[..d], t).unwrap();
    r.push(-divergence(p, &y[..d], t, &DivergenceMethod::Exact).unwrap());
    r
}

/// Pulls a state cotangent through the rates. Returns `d/dy` and adds
/// `d/dtheta` into `theta`.
fn rates_vjp(p: &FieldParams<f64>, y: &[f64], t: f64, bar: &[f64], theta: &mut [f64]) -> Vec<f64> {
    let d = p.dim();
    let cot = Cotangents { d_velocity: bar[..d].to_vec(), d_divergence: -bar[d] };
    let r = vjp(p, &y[..d], t, &cot, &DivergenceMethod::Exact).unwrap();
    for (a, b) in theta.iter_mut().zip(&r.d_theta) {
        *a += b;
    }
    let mut out = r.d_x;
    out.push(0.0);
    out
}

fn axpy(y: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    y.iter().zip(k).map(|(u, v)| u + a * v).collect()
}

/// Exact reverse-mode gradient through the unrolled inverse RK4 map
/// `x1 -> (x0, log_det)` of `sum_i <c_i, x0_i> + c_ld_i * log_det_i`.
pub fn discrete_adjoint(
    p: &FieldParams<f64>,
    x1: &SampleBatch<f64>,
    c: &SampleBatch<f64>,
    c_ld: &[f64],
    n_steps: usize,
) -> Vec<f64> {
    let d = p.dim();
    let h = -1.0 / n_steps as f64;
    let mut theta = vec![0.0; p.len()];
    for i in 0..x1.len() {
        // forward sweep, keeping every stage input
        let mut y: Vec<f64> = x1.row(i).to_vec();
        y.push(0.0);
        let mut tape = Vec::with_capacity(n_steps);
        for k in 0..n_steps {
            let t = 1.0 + k as f64 * h;
            let k1 = rates(p, &y, t);
            let s2 = axpy(&y, h / 2.0, &k1);
            let k2 = rates(p, &s2, t + h / 2.0);
            let s3 = axpy(&y, h / 2.0, &k2);
            let k3 = rates(p, &s3, t + h / 2.0);
            let s4 = axpy(&y, h, &k3);
            let k4 = rates(p, &s4, t + h);
            let next: Vec<f64> = (0..=d).map(|j| y[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])).collect();
            tape.push((t, y.clone(), s2, s3, s4));
            y = next;
        }
        // reverse sweep
        let mut ybar: Vec<f64> = c.row(i).to_vec();
        ybar.push(c_ld[i]);
        for (t, y0, s2, s3, s4) in tape.into_iter().rev() {
            let k4b: Vec<f64> = ybar.iter().map(|v| v * h / 6.0).collect();
            let mut k3b: Vec<f64> = ybar.iter().map(|v| v * h / 3.0).collect();
            let mut k2b = k3b.clone();
            let mut k1b = k4b.clone();
            let mut acc = ybar.clone();
            let s4b = rates_vjp(p, &s4, t + h, &k4b, &mut theta);
            acc = axpy(&acc, 1.0, &s4b);
            k3b = axpy(&k3b, h, &s4b);
            let s3b = rates_vjp(p, &s3, t + h / 2.0, &k3b, &mut theta);
            acc = axpy(&acc, 1.0, &s3b);
            k2b = axpy(&k2b, h / 2.0, &s3b);
            let s2b = rates_vjp(p, &s2, t + h / 2.0, &k2b, &mut theta);
            acc = axpy(&acc, 1.0, &s2b);
            k1b = axpy(&k1b, h / 2.0, &s2b);
            let s1b = rates_vjp(p, &y0, t, &k1b, &mut theta);
            ybar = axpy(&acc, 1.0, &s1b);
        }
    }
    theta
}
