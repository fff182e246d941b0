//! VDAC v1: the codec checkpoint format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! bytes 0..4    magic "VDAC"
//! u32           version (= 1)
//! u32           kind (0 = linear, 1 = neural)
//! u32           activation tag (0 = none, 1 = learnable leaky rectifier)
//! u32           width count, then that many u32 widths
//!               (linear: [n, m]; neural: encoder widths, decoder mirrored)
//! u64           parameter count
//! f64 x count   parameters (linear: Q column-major; neural: layer order)
//! u8            Adam section flag (0 or 1)
//! if 1:         u64 step, f64 x count first moments, f64 x count second
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;

use super::{Codec, CodecError, LinearCodec, NeuralCodec};
use crate::field::FormatError;

const VDAC_MAGIC: [u8; 4] = *b"VDAC";
const VDAC_VERSION: u32 = 1;

const KIND_LINEAR: u32 = 0;
const KIND_NEURAL: u32 = 1;
const ACT_NONE: u32 = 0;
const ACT_LEAKY: u32 = 1;

/// Optimizer moments that may ride along in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// A codec loaded from a checkpoint, either implementation.
#[derive(Debug, Clone)]
pub enum LoadedCodec {
    Linear(LinearCodec),
    Neural(NeuralCodec),
}

impl LoadedCodec {
    pub fn as_codec(&self) -> &dyn Codec {
        match self {
            LoadedCodec::Linear(c) => c,
            LoadedCodec::Neural(c) => c,
        }
    }
}

/// Serializable view of a codec.
enum CodecView<'a> {
    Linear(&'a LinearCodec),
    Neural(&'a NeuralCodec),
}

fn write_codec<W: Write>(
    w: &mut W,
    view: CodecView<'_>,
    adam: Option<&AdamMoments>,
) -> Result<(), FormatError> {
    let (kind, act, widths, params): (u32, u32, Vec<u32>, &[f64]) = match view {
        CodecView::Linear(c) => (
            KIND_LINEAR,
            ACT_NONE,
            vec![c.input_dim() as u32, c.latent_dim() as u32],
            c.basis().as_slice(),
        ),
        CodecView::Neural(c) => (
            KIND_NEURAL,
            ACT_LEAKY,
            c.encoder_widths().iter().map(|x| *x as u32).collect(),
            c.params(),
        ),
    };
    w.write_all(&VDAC_MAGIC)?;
    w.write_u32::<LittleEndian>(VDAC_VERSION)?;
    w.write_u32::<LittleEndian>(kind)?;
    w.write_u32::<LittleEndian>(act)?;
    w.write_u32::<LittleEndian>(widths.len() as u32)?;
    for width in &widths {
        w.write_u32::<LittleEndian>(*width)?;
    }
    w.write_u64::<LittleEndian>(params.len() as u64)?;
    for p in params {
        w.write_f64::<LittleEndian>(*p)?;
    }
    match adam {
        None => w.write_u8(0)?,
        Some(m) => {
            if m.first.len() != params.len() || m.second.len() != params.len() {
                return Err(FormatError::InvalidData("Adam moment length mismatch".into()));
            }
            w.write_u8(1)?;
            w.write_u64::<LittleEndian>(m.step)?;
            for v in &m.first {
                w.write_f64::<LittleEndian>(*v)?;
            }
            for v in &m.second {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
    }
    Ok(())
}

/// Writes a codec checkpoint; `adam` is an optional flagged section.
pub fn save_codec<P: AsRef<Path>>(
    codec: &LoadedCodec,
    adam: Option<&AdamMoments>,
    path: P,
) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    let view = match codec {
        LoadedCodec::Linear(c) => CodecView::Linear(c),
        LoadedCodec::Neural(c) => CodecView::Neural(c),
    };
    write_codec(&mut w, view, adam)?;
    w.flush()?;
    Ok(())
}

/// Convenience wrappers for the two concrete types.
pub fn save_linear_codec<P: AsRef<Path>>(c: &LinearCodec, path: P) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_codec(&mut w, CodecView::Linear(c), None)?;
    w.flush()?;
    Ok(())
}

pub fn save_neural_codec<P: AsRef<Path>>(
    c: &NeuralCodec,
    adam: Option<&AdamMoments>,
    path: P,
) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_codec(&mut w, CodecView::Neural(c), adam)?;
    w.flush()?;
    Ok(())
}

/// Reads a codec checkpoint; returns the codec and the Adam section if one
/// was present.
pub fn load_codec<P: AsRef<Path>>(path: P) -> Result<(LoadedCodec, Option<AdamMoments>), FormatError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exactly(&mut r, &mut magic)?;
    if magic != VDAC_MAGIC {
        return Err(FormatError::BadMagic { expected: "VDAC" });
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != VDAC_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let kind = r.read_u32::<LittleEndian>().map_err(eof)?;
    let act = r.read_u32::<LittleEndian>().map_err(eof)?;
    let width_count = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    if width_count == 0 || width_count > 64 {
        return Err(FormatError::InvalidData(format!("implausible width count {width_count}")));
    }
    let mut widths = Vec::with_capacity(width_count);
    for _ in 0..width_count {
        widths.push(r.read_u32::<LittleEndian>().map_err(eof)? as usize);
    }
    if widths.iter().any(|w| *w == 0) {
        return Err(FormatError::InvalidData("zero-sized layer width".into()));
    }
    let param_count = r.read_u64::<LittleEndian>().map_err(eof)?;
    let param_count = usize::try_from(param_count).map_err(|_| FormatError::DimensionOverflow)?;
    let mut params = vec![0.0f64; param_count];
    r.read_f64_into::<LittleEndian>(&mut params).map_err(eof)?;

    let codec = match (kind, act) {
        (KIND_LINEAR, ACT_NONE) => {
            if widths.len() != 2 {
                return Err(FormatError::InvalidData("linear codec needs exactly two widths".into()));
            }
            let (n, m) = (widths[0], widths[1]);
            if n.checked_mul(m) != Some(param_count) {
                return Err(FormatError::InvalidData("parameter count does not match Q".into()));
            }
            let q = DMatrix::from_column_slice(n, m, &params);
            LoadedCodec::Linear(LinearCodec::new(q).map_err(invalid)?)
        }
        (KIND_NEURAL, ACT_LEAKY) => {
            LoadedCodec::Neural(NeuralCodec::from_parts(widths, params).map_err(invalid)?)
        }
        _ => {
            return Err(FormatError::InvalidData(format!(
                "unknown codec kind {kind} / activation {act}"
            )))
        }
    };

    let mut flag = [0u8; 1];
    read_exactly(&mut r, &mut flag)?;
    let adam = match flag[0] {
        0 => None,
        1 => {
            let step = r.read_u64::<LittleEndian>().map_err(eof)?;
            let mut first = vec![0.0f64; param_count];
            r.read_f64_into::<LittleEndian>(&mut first).map_err(eof)?;
            let mut second = vec![0.0f64; param_count];
            r.read_f64_into::<LittleEndian>(&mut second).map_err(eof)?;
            Some(AdamMoments { step, first, second })
        }
        other => {
            return Err(FormatError::InvalidData(format!("bad Adam section flag {other}")))
        }
    };

    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(FormatError::InvalidData("trailing bytes after declared payload".into()));
    }
    Ok((codec, adam))
}

fn invalid(e: CodecError) -> FormatError {
    FormatError::InvalidData(e.to_string())
}

fn eof(e: std::io::Error) -> FormatError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        FormatError::Truncated { needed: 0 }
    } else {
        FormatError::Io(e)
    }
}

fn read_exactly<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(eof)
}
