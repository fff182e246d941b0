//! VDAF v1: the on-disk field series format.
//!
//! Layout, all little-endian, no padding or compression:
//!
//! ```text
//! bytes 0..4   magic "VDAF"
//! u32          version (= 1)
//! u32 x3       nx, ny, nz
//! u64          T (step count)
//! f64 x T*n    values, x-fastest order per step, steps consecutive
//! ```
//!
//! Timestep labels and grid spacing are not persisted; loading assigns
//! labels `0..T` and unit spacing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::{FieldError, FieldSeries, Grid3, StateField};

pub(crate) const VDAF_MAGIC: [u8; 4] = *b"VDAF";
pub(crate) const VDAF_VERSION: u32 = 1;

/// Errors shared by the binary file formats (fields, bases, codecs).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes, expected {expected}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated, {needed} more bytes required")]
    Truncated { needed: u64 },
    #[error("declared dimensions overflow the addressable size")]
    DimensionOverflow,
    #[error("invalid contents: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<FieldError> for FormatError {
    fn from(e: FieldError) -> Self {
        FormatError::InvalidData(e.to_string())
    }
}

/// Writes a series in VDAF v1 format.
pub fn save_series<P: AsRef<Path>>(series: &FieldSeries, path: P) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    let grid = series.grid();
    w.write_all(&VDAF_MAGIC)?;
    w.write_u32::<LittleEndian>(VDAF_VERSION)?;
    w.write_u32::<LittleEndian>(grid.nx as u32)?;
    w.write_u32::<LittleEndian>(grid.ny as u32)?;
    w.write_u32::<LittleEndian>(grid.nz as u32)?;
    w.write_u64::<LittleEndian>(series.len() as u64)?;
    for step in series.steps() {
        for v in step.values() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a VDAF v1 file back into a series.
pub fn load_series<P: AsRef<Path>>(path: P) -> Result<FieldSeries, FormatError> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exactly(&mut r, &mut magic)?;
    if magic != VDAF_MAGIC {
        return Err(FormatError::BadMagic { expected: "VDAF" });
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VDAF_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let nx = r.read_u32::<LittleEndian>()? as u64;
    let ny = r.read_u32::<LittleEndian>()? as u64;
    let nz = r.read_u32::<LittleEndian>()? as u64;
    let t = r.read_u64::<LittleEndian>()?;

    let n = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .ok_or(FormatError::DimensionOverflow)?;
    let total_values = n.checked_mul(t).ok_or(FormatError::DimensionOverflow)?;
    let payload = total_values.checked_mul(8).ok_or(FormatError::DimensionOverflow)?;
    // Header: magic 4 + version 4 + dims 12 + T 8.
    let expected = 28u64.checked_add(payload).ok_or(FormatError::DimensionOverflow)?;
    if usize::try_from(total_values).is_err() {
        return Err(FormatError::DimensionOverflow);
    }
    if file_len < expected {
        return Err(FormatError::Truncated { needed: expected - file_len });
    }
    if file_len > expected {
        return Err(FormatError::InvalidData(format!(
            "{} trailing bytes after declared payload",
            file_len - expected
        )));
    }

    let grid = Grid3::new(nx as usize, ny as usize, nz as usize)
        .map_err(|e| FormatError::InvalidData(e.to_string()))?;
    let mut steps = Vec::with_capacity(t as usize);
    let mut values = vec![0.0f64; grid.n()];
    for _ in 0..t {
        r.read_f64_into::<LittleEndian>(&mut values)?;
        steps.push(StateField::new(grid, values.clone())?);
    }
    Ok(FieldSeries::new(grid, steps)?)
}

fn read_exactly<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            FormatError::Truncated { needed: buf.len() as u64 }
        } else {
            FormatError::Io(e)
        }
    })
}
