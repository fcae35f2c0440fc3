use std::io::Write;
use std::str::FromStr;

use flowpg_core::train::Estimator;
use flowpg_core::variancelab::{toy_fm_variance, toy_ml_variance, toy_pg_at_optimum, write_variance_csv, ToyConfig, VarianceRow};

use crate::error::{CliError, CliResult};

/// A batch shape given as `NxD`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size {
    pub n: usize,
    pub d: usize,
}

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (n, d) = s.split_once(['x', 'X']).ok_or_else(|| format!("`{s}` is not of the form NxD"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("`{s}`: `{v}` is not a count"));
        Ok(Size { n: parse(n)?, d: parse(d)? })
    }
}

#[derive(Debug, Clone)]
pub struct VarianceArgs {
    pub sizes: Vec<Size>,
    pub trials: usize,
    pub theta: f64,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
}

pub fn rows(args: &VarianceArgs) -> CliResult<Vec<VarianceRow>> {
    if args.sizes.is_empty() || args.estimators.is_empty() {
        return Err(CliError::Config("need at least one size and one estimator".into()));
    }
    let mut out = Vec::new();
    for s in &args.sizes {
        let cfg = ToyConfig { n: s.n, d: s.d, trials: args.trials, theta: args.theta, seed: args.seed };
        for e in &args.estimators {
            out.push(match e {
                Estimator::Fm => toy_fm_variance(&cfg)?,
                Estimator::Ml => toy_ml_variance(&cfg)?,
                Estimator::Pg => toy_pg_at_optimum(&cfg)?.row,
            });
        }
    }
    Ok(out)
}

pub fn run<W: Write>(args: &VarianceArgs, out: W) -> CliResult<()> {
    write_variance_csv(&rows(args)?, out)?;
    Ok(())
}
