//! Metropolis-adjusted Langevin sampler used to produce force-labelled
//! training data for targets without an exact sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{centred, Dataset, EnergyModel, Provenance};
use crate::batch::SampleBatch;
use crate::error::{FlowError, Result};
use crate::rng::{normal, stream_rng, Stream};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcSettings {
    pub n: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Step-size adaptation during burn-in towards `target_acceptance`.
    #[serde(default = "default_adapt")]
    pub adapt: bool,
    #[serde(default = "default_target_acceptance")]
    pub target_acceptance: f64,
}

fn default_adapt() -> bool {
    true
}

fn default_target_acceptance() -> f64 {
    0.574
}

impl McmcSettings {
    pub fn new(n: usize, burn_in: usize, thinning: usize, step_size: f64, seed: u64) -> Self {
        Self {
            n,
            burn_in,
            thinning,
            step_size,
            seed,
            adapt: true,
            target_acceptance: default_target_acceptance(),
        }
    }
}

const ADAPT_WINDOW: usize = 50;

/// Deterministic starting configuration: particles on a hexagonal (2D) or
/// cubic lattice with unit spacing, otherwise the origin (or `x_0 = 1` for the
/// double well).
fn initial_state(model: &EnergyModel) -> Vec<f64> {
    let d = model.dim();
    match model {
        EnergyModel::LennardJones { n_particles, space_dim, .. }
        | EnergyModel::MeanFreeNormal { n_particles, space_dim } => {
            let side = (*n_particles as f64).powf(1.0 / *space_dim as f64).ceil() as usize;
            let mut x = Vec::with_capacity(d);
            for p in 0..*n_particles {
                let mut idx = p;
                for k in 0..*space_dim {
                    let c = (idx % side) as f64;
                    idx /= side;
                    // shift alternate rows by half a spacing in 2D (hexagonal packing)
                    let shift = if *space_dim == 2 && k == 0 && (p / side) % 2 == 1 { 0.5 } else { 0.0 };
                    let scale = if *space_dim == 2 && k == 1 { 3f64.sqrt() / 2.0 } else { 1.0 };
                    x.push((c + shift) * scale);
                }
            }
            centred(&x, *space_dim)
        }
        EnergyModel::DoubleWell { .. } => {
            let mut x = vec![0.0; d];
            x[0] = 1.0;
            x
        }
        EnergyModel::DiagGaussian { mean, .. } => mean.clone(),
        EnergyModel::Gmm2d { means, .. } => means[0].to_vec(),
        EnergyModel::StandardNormal { .. } => vec![0.0; d],
    }
}

struct Chain<'a> {
    model: &'a EnergyModel,
    x: Vec<f64>,
    energy: f64,
    force: Vec<f64>,
    space_dim: Option<usize>,
}

impl Chain<'_> {
    fn eval(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let u = self.model.energy(x).ok()?;
        let f = self.model.force(x).ok()?;
        (u.is_finite() && f.iter().all(|v| v.is_finite())).then_some((u, f))
    }

    /// One MALA transition; returns whether the proposal was accepted.
    fn step<R: Rng>(&mut self, h: f64, rng: &mut R) -> bool {
        let d = self.x.len();
        let mut noise: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        if let Some(sd) = self.space_dim {
            noise = centred(&noise, sd);
        }
        let s = (2.0 * h).sqrt();
        let y: Vec<f64> = (0..d).map(|i| self.x[i] + h * self.force[i] + s * noise[i]).collect();
        let Some((uy, fy)) = self.eval(&y) else {
            let _: f64 = rng.gen();
            return false;
        };
        // log q(x | y) - log q(y | x) for the Langevin proposal
        let mut fwd = 0.0;
        let mut bwd = 0.0;
        for i in 0..d {
            let a = y[i] - self.x[i] - h * self.force[i];
            let b = self.x[i] - y[i] - h * fy[i];
            fwd += a * a;
            bwd += b * b;
        }
        let log_alpha = -uy + self.energy - (bwd - fwd) / (4.0 * h);
        let u: f64 = rng.gen();
        if u.ln() < log_alpha {
            self.x = y;
            self.energy = uy;
            self.force = fy;
            true
        } else {
            false
        }
    }
}

/// Runs one MALA chain and returns `settings.n` states, every `thinning`-th
/// transition after `burn_in`, with forces attached.
pub fn mcmc_sample<T: Real>(model: &EnergyModel, settings: &McmcSettings) -> Result<Dataset<T>> {
    model.validate()?;
    if !(settings.step_size > 0.0) || !settings.step_size.is_finite() {
        return Err(FlowError::Config("MALA step_size must be positive".into()));
    }
    if settings.thinning == 0 {
        return Err(FlowError::Config("MALA thinning must be at least 1".into()));
    }
    let mut rng = stream_rng(settings.seed, Stream::Mcmc, 0);
    let x = initial_state(model);
    let mut chain = Chain {
        model,
        energy: 0.0,
        force: Vec::new(),
        space_dim: model.particles().map(|p| p.1),
        x,
    };
    let (u, f) = chain
        .eval(&chain.x)
        .ok_or_else(|| FlowError::Domain("MALA start state has no finite energy".into()))?;
    chain.energy = u;
    chain.force = f;

    let mut h = settings.step_size;
    let mut window = 0usize;
    for i in 0..settings.burn_in {
        window += usize::from(chain.step(h, &mut rng));
        if settings.adapt && (i + 1) % ADAPT_WINDOW == 0 {
            let rate = window as f64 / ADAPT_WINDOW as f64;
            h *= (2.0 * (rate - settings.target_acceptance)).exp();
            window = 0;
        }
    }

    let d = model.dim();
    let mut samples = Vec::with_capacity(settings.n * d);
    let mut forces = Vec::with_capacity(settings.n * d);
    let mut accepted = 0usize;
    for _ in 0..settings.n {
        for _ in 0..settings.thinning {
            accepted += usize::from(chain.step(h, &mut rng));
        }
        samples.extend(chain.x.iter().map(|&v| T::lit(v)));
        forces.extend(chain.force.iter().map(|&v| T::lit(v)));
    }
    let total = settings.n * settings.thinning;
    let acceptance_rate = if total == 0 { f64::NAN } else { accepted as f64 / total as f64 };
    let mut warnings = Vec::new();
    if total > 0 && !(0.1..=0.9).contains(&acceptance_rate) {
        warnings.push(format!(
            "acceptance rate {acceptance_rate:.3} outside [0.1, 0.9] with step size {h:.3e}"
        ));
    }
    Dataset::new(
        SampleBatch::new(d, samples)?,
        Some(SampleBatch::new(d, forces)?),
        model.clone(),
        Provenance::Mcmc { settings: settings.clone(), acceptance_rate, final_step_size: h, warnings },
    )
}
