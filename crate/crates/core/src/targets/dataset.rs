//! Force-labelled sample sets and their binary file format.
//!
//! ```text
//! b"FPGDATA\0"           8 bytes magic
//! u32                    format version
//! u64                    D
//! u64                    N
//! u8                     1 if forces follow the samples, else 0
//! u32                    header length in bytes
//! header                 JSON: {"model": <EnergyModel>, "source": <Provenance>}
//! f64 * N * D            samples, row-major
//! f64 * N * D            forces (only when flagged)
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{EnergyModel, McmcSettings};
use crate::batch::SampleBatch;
use crate::binio::{read_f64s, read_u32, read_u64};
use crate::error::{FlowError, Result};
use crate::scalar::Real;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FPGDATA\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    ExactSampler {
        seed: u64,
    },
    /// Metropolis-adjusted Langevin chain; not molecular dynamics.
    Mcmc {
        settings: McmcSettings,
        acceptance_rate: f64,
        final_step_size: f64,
        warnings: Vec<String>,
    },
    File {
        path: String,
    },
    /// Rows `start..end` of another dataset.
    Split {
        parent: Box<Provenance>,
        start: usize,
        end: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub samples: SampleBatch<T>,
    pub forces: Option<SampleBatch<T>>,
    pub model: EnergyModel,
    pub source: Provenance,
}

impl<T: Real> Dataset<T> {
    pub fn new(
        samples: SampleBatch<T>,
        forces: Option<SampleBatch<T>>,
        model: EnergyModel,
        source: Provenance,
    ) -> Result<Self> {
        if samples.dim() != model.dim() {
            return Err(FlowError::Shape(format!(
                "samples of dimension {} for a model of dimension {}",
                samples.dim(),
                model.dim()
            )));
        }
        if let Some(f) = &forces {
            samples.check_same_shape(f, "forces must match samples")?;
            if !f.is_finite() {
                return Err(FlowError::Domain("non-finite force entry".into()));
            }
        }
        Ok(Self { samples, forces, model, source })
    }

    /// Exact samples from a model with a closed-form sampler, optionally with forces.
    pub fn from_exact(model: &EnergyModel, n: usize, seed: u64, with_forces: bool) -> Result<Self> {
        let samples = model.sample_exact(n, seed)?;
        let forces = if with_forces { Some(model.forces(&samples)?) } else { None };
        Self::new(samples, forces, model.clone(), Provenance::ExactSampler { seed })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.dim()
    }

    /// Fills in forces from the model when they are missing.
    pub fn with_forces(mut self) -> Result<Self> {
        if self.forces.is_none() {
            self.forces = Some(self.model.forces(&self.samples)?);
        }
        Ok(self)
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            samples: self.samples.slice_rows(start, end),
            forces: self.forces.as_ref().map(|f| f.slice_rows(start, end)),
            model: self.model.clone(),
            source: Provenance::Split { parent: Box::new(self.source.clone()), start, end },
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: EnergyModel,
    source: Provenance,
}

pub fn write_dataset<T: Real, W: Write>(data: &Dataset<T>, mut out: W) -> Result<()> {
    let header = serde_json::to_vec(&Header { model: data.model.clone(), source: data.source.clone() })?;
    out.write_all(MAGIC)?;
    out.write_all(&DATASET_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(data.dim() as u64).to_le_bytes())?;
    out.write_all(&(data.len() as u64).to_le_bytes())?;
    out.write_all(&[u8::from(data.forces.is_some())])?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    let mut write_batch = |b: &SampleBatch<T>| -> Result<()> {
        let mut buf = Vec::with_capacity(b.as_slice().len() * 8);
        for v in b.as_slice() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    };
    write_batch(&data.samples)?;
    if let Some(f) = &data.forces {
        write_batch(f)?;
    }
    Ok(())
}

pub fn read_dataset<T: Real, R: Read>(mut input: R) -> Result<Dataset<T>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FlowError::Format("not a dataset file (bad magic)".into()));
    }
    let fmt = read_u32(&mut input)?;
    if fmt != DATASET_FORMAT_VERSION {
        return Err(FlowError::Format(format!("unsupported dataset format version {fmt}")));
    }
    let d = read_u64(&mut input)? as usize;
    let n = read_u64(&mut input)? as usize;
    let mut flag = [0u8; 1];
    input.read_exact(&mut flag)?;
    if flag[0] > 1 {
        return Err(FlowError::Format("invalid has_forces flag".into()));
    }
    let hlen = read_u32(&mut input)? as usize;
    let mut hbuf = vec![0u8; hlen];
    input.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf)?;
    let to_batch = |v: Vec<f64>| SampleBatch::new(d, v.into_iter().map(T::lit).collect());
    let samples = to_batch(read_f64s(&mut input, n * d)?)?;
    let forces = if flag[0] == 1 { Some(to_batch(read_f64s(&mut input, n * d)?)?) } else { None };
    Dataset::new(samples, forces, header.model, header.source)
}
