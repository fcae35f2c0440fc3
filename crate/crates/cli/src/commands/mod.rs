//! One module per subcommand, plus the file helpers they share.

pub mod evaluate;
pub mod generate;
pub mod plot;
pub mod train;
pub mod variance;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flowpg_core::metrics::WeightSet;
use flowpg_core::targets::{read_dataset, write_dataset, EnergyModel};
use flowpg_core::{Batch, Dataset, FlowError};

use crate::error::{CliError, CliResult, IoContext};

pub(crate) fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    Ok(BufWriter::new(File::create(path).at(path)?))
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(FlowError::from)?;
    writeln!(w).at(path)?;
    w.flush().at(path)
}

pub(crate) fn csv_writer(path: &Path) -> CliResult<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> CliError {
    FlowError::Format(format!("{}: {e}", path.display())).into()
}

pub(crate) fn save_dataset(path: &Path, data: &Dataset) -> CliResult<()> {
    let mut w = create(path)?;
    write_dataset(data, &mut w)?;
    w.flush().at(path)
}

pub(crate) fn load_dataset(path: &Path) -> CliResult<Dataset> {
    if !path.is_file() {
        return Err(CliError::Missing(vec![format!("{} (run generate-data first)", path.display())]));
    }
    Ok(read_dataset(BufReader::new(File::open(path).at(path)?))?)
}

/// One row of a raw log-weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub index: usize,
    /// `log p~(x) - log q(x)`; `-inf` marks a zero weight.
    pub log_w: f64,
    /// Target energy of the sample; `inf` where it is singular.
    pub energy: f64,
}

pub(crate) fn write_weights(path: &Path, weights: &WeightSet<f64>, samples: &Batch, target: &EnergyModel) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    for (index, (x, &log_w)) in samples.rows().zip(&weights.log_w).enumerate() {
        let energy = target.energy(x).unwrap_or(f64::INFINITY);
        w.serialize(WeightRow { index, log_w, energy }).map_err(|e| csv_error(path, e))?;
    }
    w.flush().at(path)
}

pub fn read_weights(path: &Path) -> CliResult<Vec<WeightRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().collect::<Result<Vec<WeightRow>, _>>().map_err(|e| csv_error(path, e))
}

/// Every regular file below `dir`, sorted.
pub(crate) fn files_under(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).at(&d)? {
            let p = entry.at(&d)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
