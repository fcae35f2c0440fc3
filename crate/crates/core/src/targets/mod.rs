//! Energy models: Boltzmann targets and base densities.
//!
//! Every model provides the energy `U(x)` and the force `-grad U(x)`. The
//! Gaussian models and the 2D mixture use the normalized convention
//! `U = -log p`, so their partition function is exactly one and
//! [`EnergyModel::log_prob_exact`] is available.

mod dataset;
mod mcmc;

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::SampleBatch;
use crate::error::{FlowError, Result};
use crate::rng::{fill_normal, normal, stream_rng, Stream};
use crate::scalar::{log_sum_exp, Real};

pub use dataset::{read_dataset, write_dataset, Dataset, Provenance, DATASET_FORMAT_VERSION};
pub use mcmc::{mcmc_sample, McmcSettings};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnergyModel {
    StandardNormal {
        dim: usize,
    },
    /// Axis-aligned Gaussian with the given means and variances.
    DiagGaussian {
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    /// Isotropic standard normal restricted to configurations of `n_particles`
    /// with zero centre of mass; the density lives on that subspace.
    MeanFreeNormal {
        n_particles: usize,
        space_dim: usize,
    },
    /// Equal-weight mixture of axis-aligned Gaussians in the plane.
    Gmm2d {
        means: Vec<[f64; 2]>,
        variances: Vec<[f64; 2]>,
    },
    /// `sum_{i<j} (d_ij^-12 - 2 d_ij^-6)` plus an optional harmonic term
    /// `oscillator/2 * sum_i |x_i - com|^2` that keeps clusters bound, all
    /// divided by `temperature` (energies are in units of kT).
    LennardJones {
        n_particles: usize,
        space_dim: usize,
        #[serde(default)]
        oscillator: f64,
        #[serde(default = "unit_temperature")]
        temperature: f64,
    },
    /// `barrier (x_0^2 - 1)^2 + 1/2 sum_{d>0} x_d^2`, unnormalized.
    DoubleWell {
        dim: usize,
        barrier: f64,
    },
}

impl EnergyModel {
    /// Four-component mixture with means `N(0, 1)` and variances `c + 0.01`,
    /// `c ~ N(0, 1)`; a draw `c <= 0` is redrawn.
    pub fn gmm2d_from_seed(seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Gmm, 0);
        let positive = |rng: &mut crate::rng::StreamRng| loop {
            let c: f64 = normal(rng);
            if c > 0.0 {
                break c + 0.01;
            }
        };
        let mut means = Vec::with_capacity(4);
        let mut variances = Vec::with_capacity(4);
        for _ in 0..4 {
            means.push([normal(&mut rng), normal(&mut rng)]);
            variances.push([positive(&mut rng), positive(&mut rng)]);
        }
        EnergyModel::Gmm2d { means, variances }
    }

    pub fn lennard_jones(n_particles: usize, space_dim: usize, oscillator: f64) -> Self {
        EnergyModel::LennardJones { n_particles, space_dim, oscillator, temperature: 1.0 }
    }

    /// Same model at another temperature; only Lennard-Jones has one.
    pub fn at_temperature(self, kt: f64) -> Result<Self> {
        match self {
            EnergyModel::LennardJones { n_particles, space_dim, oscillator, .. } => {
                let m = EnergyModel::LennardJones { n_particles, space_dim, oscillator, temperature: kt };
                m.validate()?;
                Ok(m)
            }
            other => Err(FlowError::Unsupported(format!("{} has no temperature", other.name()))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FlowError::Config(m.to_string()));
        match self {
            EnergyModel::StandardNormal { dim } | EnergyModel::DoubleWell { dim, .. } if *dim == 0 => {
                bad("model dimension must be positive")
            }
            EnergyModel::DiagGaussian { mean, var } => {
                if mean.is_empty() || mean.len() != var.len() {
                    bad("diag_gaussian needs equally long, non-empty mean and var")
                } else if var.iter().any(|&v| !(v > 0.0)) {
                    bad("diag_gaussian variances must be positive")
                } else {
                    Ok(())
                }
            }
            EnergyModel::Gmm2d { means, variances } => {
                if means.is_empty() || means.len() != variances.len() {
                    bad("gmm2d needs one variance pair per component")
                } else if variances.iter().flatten().any(|&v| !(v > 0.0)) {
                    bad("gmm2d variances must be positive")
                } else {
                    Ok(())
                }
            }
            EnergyModel::LennardJones { temperature, .. } if !(*temperature > 0.0 && temperature.is_finite()) => {
                bad("temperature must be positive")
            }
            EnergyModel::MeanFreeNormal { n_particles, space_dim }
            | EnergyModel::LennardJones { n_particles, space_dim, .. } => {
                if *n_particles < 2 || *space_dim == 0 {
                    bad("particle systems need at least two particles and space_dim > 0")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EnergyModel::StandardNormal { dim } | EnergyModel::DoubleWell { dim, .. } => *dim,
            EnergyModel::DiagGaussian { mean, .. } => mean.len(),
            EnergyModel::MeanFreeNormal { n_particles, space_dim }
            | EnergyModel::LennardJones { n_particles, space_dim, .. } => n_particles * space_dim,
            EnergyModel::Gmm2d { .. } => 2,
        }
    }

    /// Particle layout `(n_particles, space_dim)` for translation-invariant models.
    pub fn particles(&self) -> Option<(usize, usize)> {
        match self {
            EnergyModel::MeanFreeNormal { n_particles, space_dim }
            | EnergyModel::LennardJones { n_particles, space_dim, .. } => Some((*n_particles, *space_dim)),
            _ => None,
        }
    }

    /// Whether `exp(-U)` integrates to one.
    pub fn is_normalized(&self) -> bool {
        matches!(
            self,
            EnergyModel::StandardNormal { .. }
                | EnergyModel::DiagGaussian { .. }
                | EnergyModel::MeanFreeNormal { .. }
                | EnergyModel::Gmm2d { .. }
        )
    }

    fn check_x<T: Real>(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(FlowError::Shape(format!(
                "point of dimension {} for a model of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(FlowError::Domain("non-finite configuration".into()));
        }
        Ok(())
    }

    pub fn energy<T: Real>(&self, x: &[T]) -> Result<T> {
        self.check_x(x)?;
        let half = T::lit(0.5);
        Ok(match self {
            EnergyModel::StandardNormal { dim } => {
                half * x.iter().map(|&v| v * v).sum::<T>() + T::lit(0.5 * *dim as f64 * LN_2PI)
            }
            EnergyModel::DiagGaussian { mean, var } => {
                let mut u = T::zero();
                for i in 0..x.len() {
                    let r = x[i] - T::lit(mean[i]);
                    u += half * (r * r / T::lit(var[i]) + T::lit((2.0 * PI * var[i]).ln()));
                }
                u
            }
            EnergyModel::MeanFreeNormal { n_particles, space_dim } => {
                let c = centred(x, *space_dim);
                let free = ((n_particles - 1) * space_dim) as f64;
                half * c.iter().map(|&v| v * v).sum::<T>() + T::lit(0.5 * free * LN_2PI)
            }
            EnergyModel::Gmm2d { means, variances } => -gmm_log_prob(means, variances, x),
            EnergyModel::LennardJones { n_particles, space_dim, oscillator, temperature } => {
                lj_energy(x, *n_particles, *space_dim, *oscillator)? / T::lit(*temperature)
            }
            EnergyModel::DoubleWell { barrier, .. } => {
                let a = x[0] * x[0] - T::one();
                T::lit(*barrier) * a * a + half * x[1..].iter().map(|&v| v * v).sum::<T>()
            }
        })
    }

    /// `-grad U(x)`, which equals `grad log p(x)`.
    pub fn force<T: Real>(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_x(x)?;
        Ok(match self {
            EnergyModel::StandardNormal { .. } => x.iter().map(|&v| -v).collect(),
            EnergyModel::DiagGaussian { mean, var } => {
                (0..x.len()).map(|i| -(x[i] - T::lit(mean[i])) / T::lit(var[i])).collect()
            }
            EnergyModel::MeanFreeNormal { space_dim, .. } => {
                centred(x, *space_dim).into_iter().map(|v| -v).collect()
            }
            EnergyModel::Gmm2d { means, variances } => gmm_force(means, variances, x),
            EnergyModel::LennardJones { n_particles, space_dim, oscillator, temperature } => {
                let inv = T::lit(1.0 / temperature);
                lj_force(x, *n_particles, *space_dim, *oscillator)?.into_iter().map(|f| f * inv).collect()
            }
            EnergyModel::DoubleWell { barrier, .. } => {
                let mut f: Vec<T> = x.iter().map(|&v| -v).collect();
                f[0] = -T::lit(4.0 * barrier) * x[0] * (x[0] * x[0] - T::one());
                f
            }
        })
    }

    /// Normalized log-density; only for models with a closed form.
    pub fn log_prob_exact<T: Real>(&self, x: &[T]) -> Result<T> {
        if !self.is_normalized() {
            return Err(FlowError::Unsupported(format!(
                "{} has no closed-form normalized density",
                self.name()
            )));
        }
        Ok(-self.energy(x)?)
    }

    pub fn sample_exact<T: Real>(&self, n: usize, seed: u64) -> Result<SampleBatch<T>> {
        let d = self.dim();
        let mut rng = stream_rng(seed, Stream::Base, 0);
        let mut data = vec![T::zero(); n * d];
        match self {
            EnergyModel::StandardNormal { .. } => fill_normal(&mut rng, &mut data),
            EnergyModel::DiagGaussian { mean, var } => {
                for row in data.chunks_exact_mut(d) {
                    for i in 0..d {
                        row[i] = T::lit(mean[i] + var[i].sqrt() * normal::<f64, _>(&mut rng));
                    }
                }
            }
            EnergyModel::MeanFreeNormal { space_dim, .. } => {
                fill_normal(&mut rng, &mut data);
                for row in data.chunks_exact_mut(d) {
                    let c = centred(row, *space_dim);
                    row.copy_from_slice(&c);
                }
            }
            EnergyModel::Gmm2d { means, variances } => {
                for row in data.chunks_exact_mut(2) {
                    let k = rng.gen_range(0..means.len());
                    for i in 0..2 {
                        row[i] = T::lit(means[k][i] + variances[k][i].sqrt() * normal::<f64, _>(&mut rng));
                    }
                }
            }
            _ => {
                return Err(FlowError::Unsupported(format!("{} has no exact sampler", self.name())));
            }
        }
        SampleBatch::new(d, data)
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnergyModel::StandardNormal { .. } => "standard_normal",
            EnergyModel::DiagGaussian { .. } => "diag_gaussian",
            EnergyModel::MeanFreeNormal { .. } => "mean_free_normal",
            EnergyModel::Gmm2d { .. } => "gmm2d",
            EnergyModel::LennardJones { .. } => "lennard_jones",
            EnergyModel::DoubleWell { .. } => "double_well",
        }
    }

    /// Energies of every row.
    pub fn energies<T: Real>(&self, x: &SampleBatch<T>) -> Result<Vec<T>> {
        x.rows().map(|r| self.energy(r)).collect()
    }

    pub fn forces<T: Real>(&self, x: &SampleBatch<T>) -> Result<SampleBatch<T>> {
        let mut data = Vec::with_capacity(x.as_slice().len());
        for r in x.rows() {
            data.extend(self.force(r)?);
        }
        SampleBatch::new(x.dim(), data)
    }
}

pub(crate) fn centred<T: Real>(x: &[T], space_dim: usize) -> Vec<T> {
    let n = x.len() / space_dim;
    let mut out = x.to_vec();
    for k in 0..space_dim {
        let m = (0..n).map(|i| x[i * space_dim + k]).sum::<T>() / T::lit(n as f64);
        for i in 0..n {
            out[i * space_dim + k] -= m;
        }
    }
    out
}

/// Per-component log densities `log(w_k N(x; mu_k, diag s_k))`.
fn gmm_component_logs<T: Real>(means: &[[f64; 2]], variances: &[[f64; 2]], x: &[T]) -> Vec<T> {
    let log_w = -(means.len() as f64).ln();
    means
        .iter()
        .zip(variances)
        .map(|(m, s)| {
            let mut l = T::lit(log_w - LN_2PI - 0.5 * (s[0] * s[1]).ln());
            for i in 0..2 {
                let r = x[i] - T::lit(m[i]);
                l -= T::lit(0.5) * r * r / T::lit(s[i]);
            }
            l
        })
        .collect()
}

fn gmm_log_prob<T: Real>(means: &[[f64; 2]], variances: &[[f64; 2]], x: &[T]) -> T {
    log_sum_exp(&gmm_component_logs(means, variances, x))
}

fn gmm_force<T: Real>(means: &[[f64; 2]], variances: &[[f64; 2]], x: &[T]) -> Vec<T> {
    let logs = gmm_component_logs(means, variances, x);
    let total = log_sum_exp(&logs);
    let mut f = vec![T::zero(); 2];
    for (k, l) in logs.iter().enumerate() {
        let r = (*l - total).exp();
        for i in 0..2 {
            f[i] -= r * (x[i] - T::lit(means[k][i])) / T::lit(variances[k][i]);
        }
    }
    f
}

fn pair_distance_sq<T: Real>(x: &[T], i: usize, j: usize, sd: usize) -> T {
    (0..sd).map(|k| {
        let d = x[i * sd + k] - x[j * sd + k];
        d * d
    })
    .sum()
}

fn unit_temperature() -> f64 {
    1.0
}

fn lj_energy<T: Real>(x: &[T], n: usize, sd: usize, oscillator: f64) -> Result<T> {
    let mut u = T::zero();
    let two = T::lit(2.0);
    for i in 0..n {
        for j in i + 1..n {
            let r2 = pair_distance_sq(x, i, j, sd);
            if r2 == T::zero() {
                return Err(FlowError::SingularConfiguration { i, j });
            }
            let inv6 = (T::one() / r2).powi(3);
            u += inv6 * inv6 - two * inv6;
        }
    }
    if oscillator != 0.0 {
        let c = centred(x, sd);
        u += T::lit(0.5 * oscillator) * c.iter().map(|&v| v * v).sum::<T>();
    }
    Ok(u)
}

fn lj_force<T: Real>(x: &[T], n: usize, sd: usize, oscillator: f64) -> Result<Vec<T>> {
    let mut f = vec![T::zero(); x.len()];
    let twelve = T::lit(12.0);
    for i in 0..n {
        for j in i + 1..n {
            let r2 = pair_distance_sq(x, i, j, sd);
            if r2 == T::zero() {
                return Err(FlowError::SingularConfiguration { i, j });
            }
            let inv2 = T::one() / r2;
            let inv6 = inv2 * inv2 * inv2;
            // -dU/dr / r for U(r) = r^-12 - 2 r^-6
            let s = twelve * (inv6 * inv6 - inv6) * inv2;
            for k in 0..sd {
                let d = x[i * sd + k] - x[j * sd + k];
                f[i * sd + k] += s * d;
                f[j * sd + k] -= s * d;
            }
        }
    }
    if oscillator != 0.0 {
        let c = centred(x, sd);
        for (fi, ci) in f.iter_mut().zip(c) {
            *fi -= T::lit(oscillator) * ci;
        }
    }
    Ok(f)
}
