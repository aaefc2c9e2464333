//! Cleveland heart-disease data in the UCI `processed.cleveland.data`
//! layout: 14 comma-separated columns, no header, `?` for missing values.
//!
//! The count response is the disease stage `num ∈ {0, …, 4}`; ST depression
//! (`oldpeak`) and the ST slope enter both the experts and the gating as
//! `[1, Z₁, Z₂]`.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FmpreError, Result};
use crate::model::{Dataset, FitResult};
use crate::pipeline::{fit_ml, PipelineOptions};
use crate::sem::MixtureSpec;
use crate::study::SubsampleSource;

pub const HEART_COLUMNS: usize = 14;
pub const OLDPEAK_COLUMN: usize = 9;
pub const SLOPE_COLUMN: usize = 10;
pub const NUM_COLUMN: usize = 13;
/// Rows of the canonical file after complete-case filtering.
pub const CANONICAL_COMPLETE_ROWS: usize = 297;

/// Which rows survive missing values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Drop a row if any of the 14 fields is missing.
    #[default]
    CompleteCase,
    /// Drop a row only if ST depression, ST slope or the stage is missing.
    SelectedColumns,
}

/// How the ST slope enters the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeEncoding {
    /// UCI codes 1 (up), 2 (flat), 3 (down) as a single numeric covariate.
    #[default]
    Numeric,
    /// Indicators for flat and down, with up as baseline.
    Dummy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct HeartOptions {
    pub missing: MissingPolicy,
    pub slope: SlopeEncoding,
}

/// The three fields used by the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeartRecord {
    pub st_depression: f64,
    pub st_slope: u8,
    pub disease_stage: u64,
}

/// Parsed heart records and their design.
#[derive(Debug, Clone, PartialEq)]
pub struct HeartData {
    pub records: Vec<HeartRecord>,
    /// Data rows in the file before filtering.
    pub rows_read: usize,
    pub dataset: Dataset,
}

impl HeartData {
    pub fn n(&self) -> usize {
        self.records.len()
    }

    /// Sample correlation of ST depression and the numeric ST slope.
    pub fn covariate_correlation(&self) -> f64 {
        let a: Vec<f64> = self.records.iter().map(|r| r.st_depression).collect();
        let b: Vec<f64> = self.records.iter().map(|r| r.st_slope as f64).collect();
        pearson(&a, &b)
    }
}

/// Pearson correlation; NaN when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn parse_field<T: std::str::FromStr>(raw: &str, line: usize, column: usize) -> Result<Option<T>> {
    let raw = raw.trim();
    if raw == "?" {
        return Ok(None);
    }
    raw.parse().map(Some).map_err(|_| FmpreError::Format {
        line,
        message: format!("column {} has unparseable value {raw:?}", column + 1),
    })
}

fn record_from_fields(fields: &csv::StringRecord, line: usize, policy: MissingPolicy) -> Result<Option<HeartRecord>> {
    if fields.len() != HEART_COLUMNS {
        return Err(FmpreError::Format {
            line,
            message: format!("expected {HEART_COLUMNS} columns, found {}", fields.len()),
        });
    }
    let mut any_missing = false;
    for (k, raw) in fields.iter().enumerate() {
        if parse_field::<f64>(raw, line, k)?.is_none() {
            any_missing = true;
        }
    }
    let depression = parse_field::<f64>(&fields[OLDPEAK_COLUMN], line, OLDPEAK_COLUMN)?;
    let slope = parse_field::<f64>(&fields[SLOPE_COLUMN], line, SLOPE_COLUMN)?;
    let stage = parse_field::<f64>(&fields[NUM_COLUMN], line, NUM_COLUMN)?;
    let (Some(depression), Some(slope), Some(stage)) = (depression, slope, stage) else {
        return Ok(None);
    };
    if any_missing && policy == MissingPolicy::CompleteCase {
        return Ok(None);
    }
    if ![1.0, 2.0, 3.0].contains(&slope) {
        return Err(FmpreError::Format {
            line,
            message: format!("ST slope must be 1, 2 or 3, found {slope}"),
        });
    }
    if stage.fract() != 0.0 || !(0.0..=4.0).contains(&stage) {
        return Err(FmpreError::Format {
            line,
            message: format!("disease stage must be an integer in 0..=4, found {stage}"),
        });
    }
    Ok(Some(HeartRecord {
        st_depression: depression,
        st_slope: slope as u8,
        disease_stage: stage as u64,
    }))
}

/// Design `[1, Z₁, Z₂]` (or `[1, Z₁, flat, down]`) shared by experts and
/// gating.
pub fn heart_design(records: &[HeartRecord], slope: SlopeEncoding) -> Result<Dataset> {
    let cols = match slope {
        SlopeEncoding::Numeric => 3,
        SlopeEncoding::Dummy => 4,
    };
    let x = DMatrix::from_fn(records.len(), cols, |i, k| {
        let r = &records[i];
        match (k, slope) {
            (0, _) => 1.0,
            (1, _) => r.st_depression,
            (2, SlopeEncoding::Numeric) => r.st_slope as f64,
            (2, SlopeEncoding::Dummy) => f64::from(r.st_slope == 2),
            _ => f64::from(r.st_slope == 3),
        }
    });
    let y = records.iter().map(|r| r.disease_stage).collect();
    Dataset::new(y, x.clone(), x)
}

/// Parses UCI-format heart data from a reader.
pub fn parse_heart(reader: impl Read, opts: HeartOptions) -> Result<HeartData> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = Vec::new();
    let mut rows_read = 0;
    for row in csv.records() {
        let row = row?;
        let line = row.position().map_or(rows_read + 1, |p| p.line() as usize);
        if row.iter().all(str::is_empty) {
            continue;
        }
        rows_read += 1;
        if let Some(record) = record_from_fields(&row, line, opts.missing)? {
            records.push(record);
        }
    }
    if records.is_empty() {
        return Err(FmpreError::InvalidInput("no usable heart records".into()));
    }
    let dataset = heart_design(&records, opts.slope)?;
    Ok(HeartData {
        records,
        rows_read,
        dataset,
    })
}

pub fn load_heart_dataset(path: impl AsRef<Path>, opts: HeartOptions) -> Result<HeartData> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| FmpreError::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_heart(std::io::BufReader::new(file), opts)
}

/// Two-expert ML fit on the full data, used as the truth of the
/// subsampling study. The second class is the gating reference.
pub fn reference_fit(data: &Dataset, opts: &PipelineOptions) -> Result<FitResult> {
    fit_ml(data, &MixtureSpec::new(2, 1)?, opts)
}

/// Subsampling design of the heart study: the reference fit is the truth,
/// training rows are drawn without replacement and `test_n` test rows come
/// from the remainder.
pub fn heart_source(data: &Dataset, train_n: usize, test_n: usize, opts: &PipelineOptions) -> Result<(SubsampleSource, FitResult)> {
    let truth = reference_fit(data, opts)?;
    let source = SubsampleSource::new(data.clone(), truth.psi_hat.clone(), train_n, test_n)?;
    Ok((source, truth))
}
