//! Experiment configuration: one JSON file plus `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use flowpg_core::cnf::IntegratorConfig;
use flowpg_core::rng::{derive_seed, Stream};
use flowpg_core::targets::{EnergyModel, McmcSettings};
use flowpg_core::train::{Loss, Stage, TrainConfig};
use flowpg_core::vectorfield::FieldArch;

use crate::error::{CliError, CliResult, IoContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: EnergyModel,
    /// Base density; defaults to a standard normal (mean-free for particle
    /// targets).
    #[serde(default)]
    pub base: Option<EnergyModel>,
    pub data: DataConfig,
    pub arch: FieldArch,
    /// Integrator used by every ML and path-gradient stage.
    #[serde(default)]
    pub integrator: IntegratorConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
    #[serde(default)]
    pub sampler: Sampler,
    #[serde(default = "yes")]
    pub forces: bool,
    /// Existing dataset files to use instead of `<output_dir>/data/*`.
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub eval_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Sampler {
    #[default]
    Exact,
    Mcmc {
        burn_in: usize,
        thinning: usize,
        step_size: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Budget {
    Epochs(usize),
    WallSeconds(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    /// Defaults to the stage's natural loss (`cfm_standard` for FM stages).
    #[serde(default)]
    pub loss: Option<Loss>,
    pub budget: Budget,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
    #[serde(default = "one")]
    pub accumulation_steps: usize,
    /// Evaluate every this many steps (epoch budgets).
    #[serde(default)]
    pub eval_every: usize,
    /// Evaluate every this many seconds of optimizer time (wall budgets).
    #[serde(default)]
    pub eval_every_seconds: Option<f64>,
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Keep the previous stage's Adam moments instead of starting fresh.
    #[serde(default)]
    pub resume_optimizer: bool,
    /// Mixed into the global seed for this stage.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Fresh flow samples for ESS_q and log Z in the final report.
    #[serde(default = "default_model_samples")]
    pub n_model_samples: usize,
    /// Flow samples and test rows used by evaluations during training.
    #[serde(default = "default_log_samples")]
    pub n_log_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_model_samples: default_model_samples(), n_log_samples: default_log_samples() }
    }
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    1e-2
}
fn default_sigma() -> f64 {
    1e-2
}
fn default_model_samples() -> usize {
    2048
}
fn default_log_samples() -> usize {
    512
}

impl StageConfig {
    pub fn loss(&self) -> Loss {
        self.loss.unwrap_or(match self.stage {
            Stage::FmPretrain | Stage::FmFinetune => Loss::CfmStandard,
            Stage::PgFinetune => Loss::Pg,
            Stage::MlFinetune => Loss::Ml,
        })
    }

    pub fn train_config(&self, global_seed: u64, index: usize, integrator: &IntegratorConfig) -> TrainConfig {
        let (epochs, budget_seconds) = match self.budget {
            Budget::Epochs(n) => (n, None),
            Budget::WallSeconds(s) => (0, Some(s)),
        };
        TrainConfig {
            loss: self.loss(),
            batch_size: self.batch_size,
            lr: self.lr,
            sigma: self.sigma,
            epochs,
            grad_clip_norm: self.grad_clip_norm,
            accumulation_steps: self.accumulation_steps,
            seed: derive_seed(global_seed ^ self.seed, Stream::Batches, index as u64),
            integrator: integrator.clone(),
            eval_every: self.eval_every,
            budget_seconds,
            eval_every_seconds: self.eval_every_seconds,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

impl ExperimentConfig {
    pub fn base(&self) -> EnergyModel {
        self.base.clone().unwrap_or_else(|| match self.target.particles() {
            Some((n_particles, space_dim)) => EnergyModel::MeanFreeNormal { n_particles, space_dim },
            None => EnergyModel::StandardNormal { dim: self.target.dim() },
        })
    }

    pub fn train_path(&self) -> PathBuf {
        self.data.train_path.clone().unwrap_or_else(|| self.output_dir.join("data").join("train.fpgd"))
    }

    pub fn eval_path(&self) -> PathBuf {
        self.data.eval_path.clone().unwrap_or_else(|| self.output_dir.join("data").join("eval.fpgd"))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.target.validate()?;
        self.base().validate()?;
        self.arch.validate()?;
        if self.base().dim() != self.target.dim() {
            return bad(format!("base dimension {} differs from target dimension {}", self.base().dim(), self.target.dim()));
        }
        if self.arch.input_dim != self.target.dim() {
            return bad(format!("arch.input_dim {} differs from target dimension {}", self.arch.input_dim, self.target.dim()));
        }
        if self.stages.is_empty() {
            return bad("stages must not be empty".into());
        }
        if self.data.n_train == 0 || self.data.n_eval == 0 {
            return bad("data.n_train and data.n_eval must be positive".into());
        }
        self.integrator.validate()?;
        for (i, s) in self.stages.iter().enumerate() {
            s.train_config(self.seed, i, &self.integrator)
                .validate()
                .map_err(|e| CliError::Config(format!("stages.{i}: {e}")))?;
            if let Budget::WallSeconds(w) = s.budget {
                if !(w >= 0.0 && w.is_finite()) {
                    return bad(format!("stages.{i}.budget.wall_seconds must be finite and non-negative"));
                }
            }
        }
        for p in [&self.data.train_path, &self.data.eval_path].into_iter().flatten() {
            if !p.is_file() {
                return bad(format!("referenced data file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    pub fn mcmc_settings(&self, n: usize, seed: u64) -> Option<McmcSettings> {
        match self.data.sampler {
            Sampler::Exact => None,
            Sampler::Mcmc { burn_in, thinning, step_size } => Some(McmcSettings::new(n, burn_in, thinning, step_size, seed)),
        }
    }
}

/// Sets `path` (dot separated; numeric segments index arrays) to `value`,
/// parsed as JSON when possible and kept as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key.path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (depth, key) in keys.iter().enumerate() {
        let last = depth + 1 == keys.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let i: usize = key
                    .parse()
                    .map_err(|_| CliError::Config(format!("override `{path}`: `{key}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(i)
                    .ok_or_else(|| CliError::Config(format!("override `{path}`: index {i} out of range ({len} items)")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::Config(format!("override `{path}`: `{key}` is inside a non-object value"))),
        };
    }
    Err(CliError::Config("empty override path".into()))
}

/// Parses and validates a config. Returns the typed config and the JSON
/// snapshot (after overrides) that goes into run manifests.
pub fn load(path: &Path, overrides: &[String]) -> CliResult<(ExperimentConfig, Value)> {
    let text = std::fs::read_to_string(path).at(path)?;
    let mut doc: Value = serde_json::from_str(&text).map_err(|e| {
        CliError::Config(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column()))
    })?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(doc.clone()).map_err(|e| {
        let key = e.path().to_string();
        CliError::Config(format!("{}: key `{key}`: {}", path.display(), e.inner()))
    })?;
    cfg.validate()?;
    Ok((cfg, doc))
}
