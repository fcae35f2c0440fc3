use flowpg_core::rng::{derive_seed, Stream};
use flowpg_core::targets::mcmc_sample;
use flowpg_core::Dataset;

use super::save_dataset;
use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::manifest::{DirLock, Recorder, RunManifest};

/// Draws the training and evaluation sets. The two splits use independent
/// streams (index 0 and 1) of the global seed, so reruns are bit-identical.
pub fn run(cfg: &ExperimentConfig, snapshot: serde_json::Value) -> CliResult<RunManifest> {
    let out = &cfg.output_dir;
    let _lock = DirLock::acquire(out)?;
    let mut rec = Recorder::new(out, "generate-data", snapshot);
    let dir = out.join("data");
    for (index, n, name) in [(0u64, cfg.data.n_train, "train.fpgd"), (1, cfg.data.n_eval, "eval.fpgd")] {
        let seed = derive_seed(cfg.seed, Stream::Mcmc, index);
        let mut data: Dataset = match cfg.mcmc_settings(n, seed) {
            Some(settings) => mcmc_sample(&cfg.target, &settings)?,
            None => Dataset::from_exact(&cfg.target, n, seed, cfg.data.forces)?,
        };
        if !cfg.data.forces {
            data.forces = None;
        }
        let path = dir.join(name);
        save_dataset(&path, &data)?;
        rec.add(&path, false)?;
    }
    rec.finish()
}
