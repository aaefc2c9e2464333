//! Result files: JSON fit reports, CSV tables and SVG box plots.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use plotters::prelude::*;
use serde::Serialize;

use fmpre::metrics::{quantile_sorted, write_summaries_csv};
use fmpre::study::{StudyReport, METRICS};
use fmpre::{CoefficientsRecord, FitResult, Method, TuningParams};

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub method: &'static str,
    pub components: usize,
    pub loglik: f64,
    pub bic: Option<f64>,
    pub converged: bool,
    pub iterations_run: usize,
    pub selected_iteration: usize,
    pub restarts_failed: usize,
    pub coefficients: CoefficientsRecord,
    pub tuning: Option<TuningParams>,
    pub loglik_trace: Vec<f64>,
}

impl FitReport {
    pub fn new(fit: &FitResult, bic: Option<f64>) -> Self {
        Self {
            method: fit.method.label(),
            components: fit.psi_hat.components(),
            loglik: fit.loglik,
            bic,
            converged: fit.converged,
            iterations_run: fit.iterations_run,
            selected_iteration: fit.selected_iteration,
            restarts_failed: fit.restarts_failed,
            coefficients: fit.psi_hat.to_record(),
            tuning: fit.tuning.clone(),
            loglik_trace: fit.loglik_trace.clone(),
        }
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

#[derive(Serialize)]
struct ReplicateRow<'a> {
    replicate: usize,
    method: &'static str,
    beta: Option<f64>,
    alpha: Option<f64>,
    accuracy: Option<f64>,
    error: Option<&'a str>,
}

fn write_replicates(path: &Path, report: &StudyReport) -> Result<()> {
    let mut csv = csv::Writer::from_path(path)?;
    for outcome in &report.outcomes {
        for (method, result) in &outcome.results {
            let (m, error) = match result {
                Ok(m) => (Some(*m), None),
                Err(e) => (None, Some(e.as_str())),
            };
            csv.serialize(ReplicateRow {
                replicate: outcome.index,
                method: method.label(),
                beta: m.map(|m| m.beta),
                alpha: m.map(|m| m.alpha),
                accuracy: m.map(|m| m.accuracy),
                error,
            })?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Box plot of one metric across methods; whiskers at the 5% and 95%
/// quantiles, matching the reported interval.
fn write_boxplot(path: &Path, report: &StudyReport, metric: &str) -> Result<()> {
    let mut series = Vec::new();
    for m in Method::ALL {
        let mut values = report.values(m, metric);
        values.retain(|v| v.is_finite());
        if values.is_empty() {
            continue;
        }
        values.sort_by(f64::total_cmp);
        let q = |p: f64| quantile_sorted(&values, p) as f32;
        series.push((m.label(), [q(0.05), q(0.25), q(0.5), q(0.75), q(0.95)]));
    }
    if series.is_empty() {
        return Ok(());
    }
    let lo = series.iter().map(|s| s.1[0]).fold(f32::INFINITY, f32::min);
    let hi = series.iter().map(|s| s.1[4]).fold(f32::NEG_INFINITY, f32::max);
    let pad = ((hi - lo) * 0.05).max(1e-6);
    let labels: Vec<&str> = series.iter().map(|s| s.0).collect();
    let root = SVGBackend::new(path, (480, 360)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{metric} by method"), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(labels.as_slice().into_segmented(), (lo - pad)..(hi + pad))?;
    chart.configure_mesh().disable_x_mesh().draw()?;
    chart.draw_series(series.iter().map(|(label, q)| {
        let quartiles = Quartiles::new(q);
        Boxplot::new_vertical(SegmentValue::CenterOf(label), &quartiles)
    }))?;
    root.present()?;
    Ok(())
}

/// `summary.csv`, `replicates.csv` and optionally one SVG per metric.
pub fn write_study(dir: &Path, report: &StudyReport, plots: bool) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let summary = File::create(dir.join("summary.csv"))?;
    write_summaries_csv(BufWriter::new(summary), &report.summaries)?;
    write_replicates(&dir.join("replicates.csv"), report)?;
    if plots {
        for metric in METRICS {
            write_boxplot(&dir.join(format!("{metric}.svg")), report, metric)?;
        }
    }
    Ok(())
}

pub fn print_summaries(report: &StudyReport) {
    println!("{:<6} {:<9} {:>10} {:>10} {:>10} {:>6}", "method", "metric", "M", "L", "U", "failed");
    for s in &report.summaries {
        println!(
            "{:<6} {:<9} {:>10.4} {:>10.4} {:>10.4} {:>6}",
            s.method, s.parameter_block, s.median, s.lower, s.upper, s.n_failed
        );
    }
}
