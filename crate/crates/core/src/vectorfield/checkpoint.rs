//! Parameter checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"FPGFIELD"            8 bytes magic
//! u32                    format version
//! u32                    header length in bytes
//! header                 JSON: {"arch": <FieldArch>, "version": <u64>}
//! u64                    number of parameters
//! f64 * count            parameter values
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{FieldArch, FieldParams};
use crate::binio::{read_f64s, read_u32, read_u64};
use crate::error::{FlowError, Result};
use crate::scalar::Real;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FPGFIELD";

#[derive(Serialize, Deserialize)]
struct Header {
    arch: FieldArch,
    version: u64,
}

pub fn write_checkpoint<T: Real, W: Write>(params: &FieldParams<T>, mut out: W) -> Result<()> {
    let header = serde_json::to_vec(&Header { arch: params.arch.clone(), version: params.version })?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&(params.values.len() as u64).to_le_bytes())?;
    for v in &params.values {
        out.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Real, R: Read>(mut input: R) -> Result<FieldParams<T>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FlowError::Format("not a field checkpoint (bad magic)".into()));
    }
    let fmt = read_u32(&mut input)?;
    if fmt != CHECKPOINT_FORMAT_VERSION {
        return Err(FlowError::Format(format!("unsupported checkpoint format version {fmt}")));
    }
    let hlen = read_u32(&mut input)? as usize;
    let mut hbuf = vec![0u8; hlen];
    input.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf)?;
    let n = read_u64(&mut input)? as usize;
    if n != header.arch.parameter_count() {
        return Err(FlowError::Format(format!(
            "checkpoint holds {n} values, architecture needs {}",
            header.arch.parameter_count()
        )));
    }
    let values = read_f64s(&mut input, n)?.into_iter().map(T::lit).collect();
    FieldParams::from_values(header.arch, values, header.version)
}
