//! Datasets from comma-separated files with a header row.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{FmpreError, Result};
use crate::model::Dataset;

/// Column selection for [`read_table`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSpec {
    pub response: String,
    pub x: Vec<String>,
    pub omega: Vec<String>,
    /// Prepend a column of ones to both designs.
    pub intercept: bool,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| FmpreError::InvalidInput(format!("no column named {name:?}")))
}

fn parse_cell(raw: &str, name: &str, line: usize) -> Result<f64> {
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| FmpreError::Format {
            line,
            message: format!("column {name:?} has non-numeric value {raw:?}"),
        })
}

fn parse_count(raw: &str, name: &str, line: usize) -> Result<u64> {
    let v = parse_cell(raw, name, line)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(FmpreError::Format {
            line,
            message: format!("response {name:?} must be a non-negative integer, found {raw:?}"),
        });
    }
    Ok(v as u64)
}

/// Reads counts and designs from CSV text.
pub fn read_table(reader: impl Read, spec: &TableSpec) -> Result<Dataset> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers()?.clone();
    let y_col = column(&headers, &spec.response)?;
    let x_cols = spec.x.iter().map(|c| column(&headers, c)).collect::<Result<Vec<_>>>()?;
    let w_cols = spec.omega.iter().map(|c| column(&headers, c)).collect::<Result<Vec<_>>>()?;
    let offset = usize::from(spec.intercept);
    let mut y = Vec::new();
    let mut x_rows = Vec::new();
    let mut w_rows = Vec::new();
    for row in csv.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != headers.len() {
            return Err(FmpreError::Format {
                line,
                message: format!("expected {} fields, found {}", headers.len(), row.len()),
            });
        }
        y.push(parse_count(&row[y_col], &spec.response, line)?);
        for (cols, names, out) in [(&x_cols, &spec.x, &mut x_rows), (&w_cols, &spec.omega, &mut w_rows)] {
            if spec.intercept {
                out.push(1.0);
            }
            for (&c, name) in cols.iter().zip(names) {
                out.push(parse_cell(&row[c], name, line)?);
            }
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(FmpreError::InvalidInput("table has no data rows".into()));
    }
    let x = DMatrix::from_row_slice(n, x_cols.len() + offset, &x_rows);
    let omega = DMatrix::from_row_slice(n, w_cols.len() + offset, &w_rows);
    Dataset::new(y, x, omega)
}

pub fn load_table(path: impl AsRef<Path>, spec: &TableSpec) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| FmpreError::Io(format!("{}: {e}", path.as_ref().display())))?;
    read_table(std::io::BufReader::new(file), spec)
}
