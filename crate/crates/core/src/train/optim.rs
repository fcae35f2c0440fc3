use serde::{Deserialize, Serialize};

use super::{Estimator, GradEstimate};
use crate::error::{FlowError, Result};
use crate::scalar::Real;
use crate::vectorfield::FieldParams;

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn adam(n_params: usize, lr: f64) -> Self {
        Self { m: vec![T::zero(); n_params], v: vec![T::zero(); n_params], step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update. Pure: returns new state and parameters.
pub fn adam_step<T: Real>(
    state: &OptimizerState<T>,
    params: &FieldParams<T>,
    grad: &[T],
) -> Result<(OptimizerState<T>, FieldParams<T>)> {
    let n = params.len();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(FlowError::Shape(format!(
            "optimizer over {} parameters got a gradient of {} and moments of {}",
            n,
            grad.len(),
            state.m.len()
        )));
    }
    let step = state.step + 1;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::one() - T::lit(state.beta1.powi(step as i32));
    let c2 = T::one() - T::lit(state.beta2.powi(step as i32));
    let (lr, eps) = (T::lit(state.lr), T::lit(state.eps));
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut theta = Vec::with_capacity(n);
    for i in 0..n {
        let g = grad[i];
        let mi = b1 * state.m[i] + (T::one() - b1) * g;
        let vi = b2 * state.v[i] + (T::one() - b2) * g * g;
        theta.push(params.values()[i] - lr * (mi / c1) / ((vi / c2).sqrt() + eps));
        m.push(mi);
        v.push(vi);
    }
    let next = OptimizerState { m, v, step, ..state.clone() };
    Ok((next, params.with_values(theta)?))
}

pub fn grad_norm<T: Real>(g: &[T]) -> T {
    g.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Mean of `grads`, then global-norm clipping to `clip_norm`.
pub fn clip_and_accumulate<T: Real>(grads: &[GradEstimate<T>], clip_norm: Option<f64>) -> Result<GradEstimate<T>> {
    let first = grads.first().ok_or_else(|| FlowError::Shape("nothing to accumulate".into()))?;
    let n = first.values.len();
    if grads.iter().any(|g| g.values.len() != n || g.estimator != first.estimator) {
        return Err(FlowError::Shape("accumulated gradients differ in shape or estimator".into()));
    }
    let k = T::lit(grads.len() as f64);
    let mut values = vec![T::zero(); n];
    for g in grads {
        for (a, &b) in values.iter_mut().zip(&g.values) {
            *a += b;
        }
    }
    for a in &mut values {
        *a /= k;
    }
    if let Some(c) = clip_norm {
        let norm = grad_norm(&values);
        if norm > T::lit(c) {
            let s = T::lit(c) / norm;
            for a in &mut values {
                *a *= s;
            }
        }
    }
    let aux = if grads.iter().all(|g| g.aux.is_some()) {
        Some(grads.iter().filter_map(|g| g.aux).sum::<f64>() / grads.len() as f64)
    } else {
        None
    };
    Ok(GradEstimate {
        values,
        estimator: first.estimator,
        batch_size: grads.iter().map(|g| g.batch_size).sum(),
        aux,
    })
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Fm => "fm",
            Estimator::Ml => "ml",
            Estimator::Pg => "pg",
        }
    }
}
