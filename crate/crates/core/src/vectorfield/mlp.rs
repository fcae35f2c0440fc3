//! Layer-by-layer passes through the fully connected field network.
//!
//! Parameters of layer `l` are laid out as the row-major `out x in` weight
//! matrix followed by the `out` biases. Hidden layers apply the activation,
//! the output layer is affine.
//!
//! Besides the primal forward and the ordinary reverse pass there is a
//! forward-mode tangent pass and a *dual* reverse pass: the reverse pass run
//! on (value, tangent) pairs, where the tangent is the derivative along an
//! input direction `u`. For a seed `w` the dual pass returns
//! `J^T w` together with `d/dx (w^T J u)` and `d/dtheta (w^T J u)`, which is
//! what the divergence gradients need.

use super::{Activation, FieldArch};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerShape {
    pub n_in: usize,
    pub n_out: usize,
    pub offset: usize,
}

impl LayerShape {
    pub fn n_params(&self) -> usize {
        self.n_out * (self.n_in + 1)
    }
    pub fn weights<'a, T>(&self, theta: &'a [T]) -> &'a [T] {
        &theta[self.offset..self.offset + self.n_in * self.n_out]
    }
    pub fn biases<'a, T>(&self, theta: &'a [T]) -> &'a [T] {
        let w_end = self.offset + self.n_in * self.n_out;
        &theta[w_end..w_end + self.n_out]
    }
    fn grads_mut<'a, T>(&self, g: &'a mut [T]) -> (&'a mut [T], &'a mut [T]) {
        let block = &mut g[self.offset..self.offset + self.n_params()];
        block.split_at_mut(self.n_in * self.n_out)
    }
}

pub(crate) fn layer_shapes(arch: &FieldArch) -> Vec<LayerShape> {
    let mut sizes = Vec::with_capacity(arch.hidden_widths.len() + 2);
    sizes.push(arch.input_dim + 1);
    sizes.extend_from_slice(&arch.hidden_widths);
    sizes.push(arch.input_dim);
    let mut offset = 0;
    sizes
        .windows(2)
        .map(|w| {
            let s = LayerShape { n_in: w[0], n_out: w[1], offset };
            offset += s.n_params();
            s
        })
        .collect()
}

impl Activation {
    /// `(sigma(z), sigma'(z), sigma''(z))`
    #[inline]
    fn eval<T: Real>(self, z: T) -> (T, T, T) {
        match self {
            Activation::Tanh => {
                let s = z.tanh();
                let d1 = T::one() - s * s;
                (s, d1, -(s + s) * d1)
            }
            // ELU with alpha = 1; the second derivative jumps at 0.
            Activation::Elu => {
                if z > T::zero() {
                    (z, T::one(), T::zero())
                } else {
                    let e = z.exp();
                    (e - T::one(), e, e)
                }
            }
        }
    }
}

/// Stored primal pass.
pub(crate) struct Tape<T> {
    /// Layer inputs: `acts[0]` is the network input, `acts[l]` the output of hidden layer `l`.
    pub acts: Vec<Vec<T>>,
    /// First and second activation derivatives at each hidden pre-activation.
    pub d1: Vec<Vec<T>>,
    pub d2: Vec<Vec<T>>,
    pub out: Vec<T>,
}

#[inline]
fn affine<T: Real>(shape: &LayerShape, theta: &[T], input: &[T], with_bias: bool) -> Vec<T> {
    let w = shape.weights(theta);
    let b = shape.biases(theta);
    (0..shape.n_out)
        .map(|i| {
            let row = &w[i * shape.n_in..(i + 1) * shape.n_in];
            let acc = row.iter().zip(input).fold(T::zero(), |a, (&wi, &xi)| a + wi * xi);
            if with_bias {
                acc + b[i]
            } else {
                acc
            }
        })
        .collect()
}

/// `out[j] += sum_i W[i, j] * cot[i]`
#[inline]
fn affine_transpose<T: Real>(shape: &LayerShape, theta: &[T], cot: &[T]) -> Vec<T> {
    let w = shape.weights(theta);
    let mut out = vec![T::zero(); shape.n_in];
    for (i, &c) in cot.iter().enumerate() {
        if c == T::zero() {
            continue;
        }
        let row = &w[i * shape.n_in..(i + 1) * shape.n_in];
        for (o, &wi) in out.iter_mut().zip(row) {
            *o += wi * c;
        }
    }
    out
}

/// `gW += scale * cot outer input`, `gb += scale * cot`
#[inline]
fn accumulate_outer<T: Real>(
    shape: &LayerShape,
    grad: &mut [T],
    cot: &[T],
    input: &[T],
    scale: T,
    with_bias: bool,
) {
    let (gw, gb) = shape.grads_mut(grad);
    for (i, &c) in cot.iter().enumerate() {
        let c = c * scale;
        if c == T::zero() {
            continue;
        }
        let row = &mut gw[i * shape.n_in..(i + 1) * shape.n_in];
        for (g, &h) in row.iter_mut().zip(input) {
            *g += c * h;
        }
        if with_bias {
            gb[i] += c;
        }
    }
}

pub(crate) fn forward<T: Real>(
    shapes: &[LayerShape],
    act: Activation,
    theta: &[T],
    input: Vec<T>,
) -> Tape<T> {
    let n_hidden = shapes.len() - 1;
    let mut acts = Vec::with_capacity(n_hidden + 1);
    let mut d1 = Vec::with_capacity(n_hidden);
    let mut d2 = Vec::with_capacity(n_hidden);
    acts.push(input);
    for shape in &shapes[..n_hidden] {
        let z = affine(shape, theta, acts.last().unwrap(), true);
        let mut h = Vec::with_capacity(z.len());
        let mut s1 = Vec::with_capacity(z.len());
        let mut s2 = Vec::with_capacity(z.len());
        for zi in z {
            let (a, b, c) = act.eval(zi);
            h.push(a);
            s1.push(b);
            s2.push(c);
        }
        acts.push(h);
        d1.push(s1);
        d2.push(s2);
    }
    let out = affine(&shapes[n_hidden], theta, acts.last().unwrap(), true);
    Tape { acts, d1, d2, out }
}

/// Forward-mode tangents. Returns the tangent of every layer input (same
/// indexing as `Tape::acts`), the tangent of every hidden pre-activation and
/// the output tangent.
pub(crate) struct Tangent<T> {
    pub acts: Vec<Vec<T>>,
    pub pre: Vec<Vec<T>>,
    pub out: Vec<T>,
}

pub(crate) fn tangent<T: Real>(
    shapes: &[LayerShape],
    theta: &[T],
    tape: &Tape<T>,
    input_tangent: Vec<T>,
) -> Tangent<T> {
    let n_hidden = shapes.len() - 1;
    let mut acts = Vec::with_capacity(n_hidden + 1);
    let mut pre = Vec::with_capacity(n_hidden);
    acts.push(input_tangent);
    for (l, shape) in shapes[..n_hidden].iter().enumerate() {
        let zd = affine(shape, theta, acts.last().unwrap(), false);
        let hd = zd.iter().zip(&tape.d1[l]).map(|(&a, &b)| a * b).collect();
        pre.push(zd);
        acts.push(hd);
    }
    let out = affine(&shapes[n_hidden], theta, acts.last().unwrap(), false);
    Tangent { acts, pre, out }
}

/// Ordinary reverse pass. Adds `scale * (d out / d theta)^T seed` into
/// `grad_theta` when given and returns the input cotangent.
pub(crate) fn reverse<T: Real>(
    shapes: &[LayerShape],
    theta: &[T],
    tape: &Tape<T>,
    seed: &[T],
    mut grad_theta: Option<(&mut [T], T)>,
) -> Vec<T> {
    let n_hidden = shapes.len() - 1;
    if let Some((g, s)) = grad_theta.as_mut() {
        accumulate_outer(&shapes[n_hidden], g, seed, &tape.acts[n_hidden], *s, true);
    }
    let mut h_bar = affine_transpose(&shapes[n_hidden], theta, seed);
    for l in (0..n_hidden).rev() {
        let z_bar: Vec<T> = h_bar.iter().zip(&tape.d1[l]).map(|(&a, &b)| a * b).collect();
        if let Some((g, s)) = grad_theta.as_mut() {
            accumulate_outer(&shapes[l], g, &z_bar, &tape.acts[l], *s, true);
        }
        h_bar = affine_transpose(&shapes[l], theta, &z_bar);
    }
    h_bar
}

/// Reverse pass carried out on (value, tangent) pairs.
///
/// Returns `(J^T seed, d/dinput (seed^T J u))` as full input-length vectors,
/// where `u` is the input tangent that produced `tan`. When `grad_theta` is
/// given, `scale * d/dtheta (seed^T J u)` is added into it.
pub(crate) fn dual_reverse<T: Real>(
    shapes: &[LayerShape],
    theta: &[T],
    tape: &Tape<T>,
    tan: &Tangent<T>,
    seed: &[T],
    mut grad_theta: Option<(&mut [T], T)>,
) -> (Vec<T>, Vec<T>) {
    let n_hidden = shapes.len() - 1;
    // Output layer: the seed is constant, so only the weight cotangent picks
    // up a tangent, through the tangent of the layer input.
    if let Some((g, s)) = grad_theta.as_mut() {
        accumulate_outer(&shapes[n_hidden], g, seed, &tan.acts[n_hidden], *s, false);
    }
    let mut h_bar = affine_transpose(&shapes[n_hidden], theta, seed);
    let mut h_bar_dot = vec![T::zero(); h_bar.len()];
    for l in (0..n_hidden).rev() {
        let d1 = &tape.d1[l];
        let d2 = &tape.d2[l];
        let zd = &tan.pre[l];
        let mut z_bar = Vec::with_capacity(d1.len());
        let mut z_bar_dot = Vec::with_capacity(d1.len());
        for i in 0..d1.len() {
            z_bar.push(d1[i] * h_bar[i]);
            z_bar_dot.push(d2[i] * zd[i] * h_bar[i] + d1[i] * h_bar_dot[i]);
        }
        if let Some((g, s)) = grad_theta.as_mut() {
            accumulate_outer(&shapes[l], g, &z_bar_dot, &tape.acts[l], *s, true);
            accumulate_outer(&shapes[l], g, &z_bar, &tan.acts[l], *s, false);
        }
        h_bar = affine_transpose(&shapes[l], theta, &z_bar);
        h_bar_dot = affine_transpose(&shapes[l], theta, &z_bar_dot);
    }
    (h_bar, h_bar_dot)
}
