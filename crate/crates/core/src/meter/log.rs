//! Batch log CSV files, one per (model, strategy) pair.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::BatchMeasurement;

pub const LOG_HEADER: [&str; 17] = [
    "timestamp",
    "run_id",
    "batch_id",
    "model",
    "strategy",
    "duration",
    "emissions",
    "cpu_energy",
    "gpu_energy",
    "ram_energy",
    "energy_consumed",
    "input_tokens",
    "output_tokens",
    "total_tokens",
    "n_executions",
    "cpu_backend",
    "gpu_backend",
];

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: header {found:?} does not match the batch log schema")]
    Schema { path: PathBuf, found: String },
    #[error("{path}:{line}: {reason}")]
    Row { path: PathBuf, line: u64, reason: String },
}

/// Enough digits to round-trip any f64.
fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn check_header(path: &Path, first: &str) -> Result<(), LogError> {
    if first.trim_end_matches(['\r', '\n']) != LOG_HEADER.join(",") {
        return Err(LogError::Schema {
            path: path.to_path_buf(),
            found: first.trim_end().to_string(),
        });
    }
    Ok(())
}

/// Appends one row, writing the header first for a new or empty file.
/// Returns the number of data rows now in the file.
pub fn append_log(m: &BatchMeasurement, path: &Path) -> Result<usize, LogError> {
    let existing_rows = if path.exists() {
        let f = File::open(path).map_err(io(path))?;
        let mut lines = BufReader::new(f).lines();
        match lines.next() {
            None => None,
            Some(first) => {
                check_header(path, &first.map_err(io(path))?)?;
                let mut n = 0;
                for l in lines {
                    if !l.map_err(io(path))?.trim().is_empty() {
                        n += 1;
                    }
                }
                Some(n)
            }
        }
    } else {
        None
    };
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let write_err = |e: csv::Error| LogError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    if existing_rows.is_none() {
        w.write_record(LOG_HEADER).map_err(write_err)?;
    }
    w.write_record([
        m.timestamp.clone(),
        m.run_id.clone(),
        m.batch_id.to_string(),
        m.model.clone(),
        m.strategy.as_str().to_string(),
        float(m.duration),
        float(m.emissions),
        float(m.cpu_energy),
        float(m.gpu_energy),
        float(m.ram_energy),
        float(m.energy_consumed),
        m.input_tokens.to_string(),
        m.output_tokens.to_string(),
        m.total_tokens.to_string(),
        m.n_executions.to_string(),
        m.cpu_backend.clone(),
        m.gpu_backend.clone(),
    ])
    .map_err(write_err)?;
    let mut file = w.into_inner().map_err(|e| LogError::Io {
        path: path.to_path_buf(),
        source: e.into_error(),
    })?;
    file.flush().map_err(io(path))?;
    Ok(existing_rows.unwrap_or(0) + 1)
}

/// Reads every row of a batch log. A missing file is an error.
pub fn read_log(path: &Path) -> Result<Vec<BatchMeasurement>, LogError> {
    let f = File::open(path).map_err(io(path))?;
    let mut first = String::new();
    BufReader::new(f).read_line(&mut first).map_err(io(path))?;
    if first.is_empty() {
        return Ok(Vec::new());
    }
    check_header(path, &first)?;
    let mut rdr = csv::Reader::from_path(path).map_err(|e| LogError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<BatchMeasurement>() {
        let m = rec.map_err(|e| LogError::Row {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        rows.push(m);
    }
    Ok(rows)
}
