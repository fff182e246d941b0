//! CSV report export and re-import.
//!
//! Fixed column order, UTF-8, `\n` line endings, floats at 17 significant
//! digits so every finite value re-parses to the identical bits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use super::{MetricError, MetricRecord, PipelineKind};

pub(crate) const HEADER: &str =
    "pipeline,tau,M,sigma0,step,da_mse,ref_mse,iterations,minimize_s,restore_s,total_s,converged";

fn fmt_float(v: f64) -> String {
    // 17 significant digits: enough to reproduce any f64 exactly.
    format!("{v:.16e}")
}

/// Writes records in the report schema.
pub fn export_report<P: AsRef<Path>>(
    records: &[MetricRecord],
    path: P,
) -> Result<(), MetricError> {
    let mut w = BufWriter::new(File::create(path).map_err(crate::field::FormatError::Io)?);
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.pipeline,
            r.tau,
            r.m_obs,
            fmt_float(r.sigma0),
            r.step,
            fmt_float(r.da_mse),
            fmt_float(r.ref_mse),
            fmt_float(r.iterations),
            fmt_float(r.minimize_s),
            fmt_float(r.restore_s),
            fmt_float(r.total_s),
            r.converged,
        ));
    }
    w.write_all(out.as_bytes()).map_err(crate::field::FormatError::Io)?;
    w.flush().map_err(crate::field::FormatError::Io)?;
    Ok(())
}

/// Parses a report written by [`export_report`].
pub fn import_report<P: AsRef<Path>>(path: P) -> Result<Vec<MetricRecord>, MetricError> {
    let text = std::fs::read_to_string(path).map_err(crate::field::FormatError::Io)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == HEADER => {}
        Some((_, other)) => {
            return Err(MetricError::Parse { line: 1, reason: format!("bad header {other:?}") })
        }
        None => return Err(MetricError::Parse { line: 1, reason: "empty file".into() }),
    }

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(MetricError::Parse {
                line: line_no,
                reason: format!("expected 12 fields, found {}", fields.len()),
            });
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, MetricError> {
            f64::from_str(s).map_err(|e| MetricError::Parse {
                line: line_no,
                reason: format!("{what}: {e}"),
            })
        };
        records.push(MetricRecord {
            pipeline: PipelineKind::from_str(fields[0])
                .map_err(|reason| MetricError::Parse { line: line_no, reason })?,
            tau: fields[1].parse().map_err(|e| MetricError::Parse {
                line: line_no,
                reason: format!("tau: {e}"),
            })?,
            m_obs: fields[2].parse().map_err(|e| MetricError::Parse {
                line: line_no,
                reason: format!("M: {e}"),
            })?,
            sigma0: parse_f(fields[3], "sigma0")?,
            step: fields[4].parse().map_err(|e| MetricError::Parse {
                line: line_no,
                reason: format!("step: {e}"),
            })?,
            da_mse: parse_f(fields[5], "da_mse")?,
            ref_mse: parse_f(fields[6], "ref_mse")?,
            iterations: parse_f(fields[7], "iterations")?,
            minimize_s: parse_f(fields[8], "minimize_s")?,
            restore_s: parse_f(fields[9], "restore_s")?,
            total_s: parse_f(fields[10], "total_s")?,
            converged: match fields[11] {
                "true" => true,
                "false" => false,
                other => {
                    return Err(MetricError::Parse {
                        line: line_no,
                        reason: format!("converged: {other:?}"),
                    })
                }
            },
        });
    }
    Ok(records)
}
