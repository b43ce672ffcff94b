//! TSV matrix round-tripping and JSON helpers.
//!
//! Matrices are written with a one-line header (`id` plus column names) and
//! one labelled row per line. Floats use Rust's shortest round-trip
//! formatting, so write -> read -> write is byte-identical.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

/// A labelled matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedMatrix {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub values: DMatrix<f64>,
}

impl NamedMatrix {
    pub fn new(values: DMatrix<f64>, row_ids: Vec<String>, col_ids: Vec<String>) -> Result<Self> {
        if row_ids.len() != values.nrows() || col_ids.len() != values.ncols() {
            return Err(Error::DimensionMismatch {
                context: "NamedMatrix labels".into(),
                expected: values.nrows(),
                found: row_ids.len(),
            });
        }
        Ok(Self {
            row_ids,
            col_ids,
            values,
        })
    }

    /// Default labels: r0..r{p-1} and c0..c{n-1}.
    pub fn with_default_ids(values: DMatrix<f64>, row_prefix: &str, col_prefix: &str) -> Self {
        let row_ids = (0..values.nrows())
            .map(|i| format!("{row_prefix}{i}"))
            .collect();
        let col_ids = (0..values.ncols())
            .map(|j| format!("{col_prefix}{j}"))
            .collect();
        Self {
            row_ids,
            col_ids,
            values,
        }
    }
}

pub fn write_matrix_tsv(path: &Path, matrix: &NamedMatrix) -> Result<()> {
    let mut out = String::new();
    out.push_str("id");
    for c in &matrix.col_ids {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for i in 0..matrix.values.nrows() {
        out.push_str(&matrix.row_ids[i]);
        for j in 0..matrix.values.ncols() {
            out.push('\t');
            out.push_str(&format_float(matrix.values[(i, j)]));
        }
        out.push('\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_matrix_tsv(path: &Path) -> Result<NamedMatrix> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        reason: "empty file".into(),
    })?;
    let mut cols: Vec<&str> = header.split('\t').collect();
    if cols.is_empty() || cols[0] != "id" {
        return Err(Error::Parse {
            path: path.display().to_string(),
            reason: "header must start with 'id'".into(),
        });
    }
    cols.remove(0);
    let col_ids: Vec<String> = cols.iter().map(|s| s.to_string()).collect();
    let n = col_ids.len();
    let mut row_ids = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let id = parts.next().unwrap_or_default();
        row_ids.push(id.to_string());
        let mut count = 0usize;
        for part in parts {
            let v: f64 = part.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                reason: format!("line {}: bad float '{part}'", lineno + 2),
            })?;
            data.push(v);
            count += 1;
        }
        if count != n {
            return Err(Error::Parse {
                path: path.display().to_string(),
                reason: format!("line {}: expected {n} values, found {count}", lineno + 2),
            });
        }
    }
    let p = row_ids.len();
    let values = DMatrix::from_row_iterator(p, n, data);
    Ok(NamedMatrix {
        row_ids,
        col_ids,
        values,
    })
}

/// Shortest round-trip decimal representation (Rust's default float Display).
pub fn format_float(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else if x.is_nan() {
        "nan".into()
    } else {
        format!("{x}")
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
