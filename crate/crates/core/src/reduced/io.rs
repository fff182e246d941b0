//! VDAB v1: the truncated-basis checkpoint format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! bytes 0..4   magic "VDAB"
//! u32          version (= 1)
//! u64          n
//! u32          S
//! u32          tau
//! f64 x n*S    U, column-major
//! f64 x S      sigma
//! f64 x S*S    Wt, column-major
//! f64 x n      mean
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};

use super::{SvdFactors, TruncatedBasis};
use crate::field::FormatError;

const VDAB_MAGIC: [u8; 4] = *b"VDAB";
const VDAB_VERSION: u32 = 1;

/// Writes a basis checkpoint.
pub fn save_basis<P: AsRef<Path>>(basis: &TruncatedBasis, path: P) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    let f = basis.factors();
    w.write_all(&VDAB_MAGIC)?;
    w.write_u32::<LittleEndian>(VDAB_VERSION)?;
    w.write_u64::<LittleEndian>(f.n() as u64)?;
    w.write_u32::<LittleEndian>(f.sample_count() as u32)?;
    w.write_u32::<LittleEndian>(basis.tau() as u32)?;
    for v in f.u().as_slice() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    for v in f.sigma().as_slice() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    for v in f.wt().as_slice() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    for v in basis.mean().as_slice() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a basis checkpoint back.
pub fn load_basis<P: AsRef<Path>>(path: P) -> Result<TruncatedBasis, FormatError> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(map_eof)?;
    if magic != VDAB_MAGIC {
        return Err(FormatError::BadMagic { expected: "VDAB" });
    }
    let version = r.read_u32::<LittleEndian>().map_err(map_eof_io)?;
    if version != VDAB_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let n = r.read_u64::<LittleEndian>().map_err(map_eof_io)?;
    let s = r.read_u32::<LittleEndian>().map_err(map_eof_io)? as u64;
    let tau = r.read_u32::<LittleEndian>().map_err(map_eof_io)? as u64;

    if s == 0 || n == 0 {
        return Err(FormatError::InvalidData("empty basis dimensions".into()));
    }
    if tau == 0 || tau > s {
        return Err(FormatError::InvalidData(format!("tau {tau} outside 1..={s}")));
    }
    let values = n
        .checked_mul(s)
        .and_then(|us| us.checked_add(s))
        .and_then(|acc| s.checked_mul(s).and_then(|ss| acc.checked_add(ss)))
        .and_then(|acc| acc.checked_add(n))
        .ok_or(FormatError::DimensionOverflow)?;
    let expected = values
        .checked_mul(8)
        .and_then(|p| p.checked_add(24))
        .ok_or(FormatError::DimensionOverflow)?;
    if usize::try_from(values).is_err() {
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

    let (n, s, tau) = (n as usize, s as usize, tau as usize);
    let mut buf = vec![0.0f64; n * s];
    r.read_f64_into::<LittleEndian>(&mut buf).map_err(map_eof_io)?;
    let u = DMatrix::from_column_slice(n, s, &buf);
    let mut sig = vec![0.0f64; s];
    r.read_f64_into::<LittleEndian>(&mut sig).map_err(map_eof_io)?;
    let mut wt_buf = vec![0.0f64; s * s];
    r.read_f64_into::<LittleEndian>(&mut wt_buf).map_err(map_eof_io)?;
    let wt = DMatrix::from_column_slice(s, s, &wt_buf);
    let mut mean = vec![0.0f64; n];
    r.read_f64_into::<LittleEndian>(&mut mean).map_err(map_eof_io)?;

    if sig.windows(2).any(|w| w[1] > w[0]) || sig.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(FormatError::InvalidData("spectrum not non-increasing and finite".into()));
    }

    let factors = SvdFactors::from_parts(u, DVector::from_vec(sig), wt);
    Ok(TruncatedBasis::from_parts(factors, tau, DVector::from_vec(mean)))
}

fn map_eof(e: std::io::Error) -> FormatError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        FormatError::Truncated { needed: 0 }
    } else {
        FormatError::Io(e)
    }
}

fn map_eof_io(e: std::io::Error) -> FormatError {
    map_eof(e)
}
