//! Monte-Carlo replication harness.
//!
//! Every replicate draws a training set and a labelled test set, runs the
//! ML → ridge → Liu-type pipeline, aligns each fit to the truth and records
//! `√MSE(β̂)`, `√MSE(α̂)` and test accuracy. Replicates run on a rayon pool
//! but use streams derived from `(master_seed, replicate)`, so results do
//! not depend on the pool width.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FmpreError, Result};
use crate::metrics::{align_to, classification_accuracy, sqrt_mse, summarize_replicates, Block, ReplicationSummary};
use crate::model::{Coefficients, Dataset, Method};
use crate::pipeline::{fit_all, PipelineOptions};
use crate::rng::{derive_seed, stream_rng};
use crate::sem::{e_step, MixtureSpec};
use crate::simulation::{simulate, SimulationDesign};

/// The three metrics recorded per method and replicate.
pub const METRICS: [&str; 3] = ["beta", "alpha", "accuracy"];

/// Training and test data of one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateData {
    pub train: Dataset,
    pub test: Dataset,
    pub test_labels: Vec<usize>,
}

/// Where replicate data sets come from.
pub trait ReplicateSource: Sync {
    fn truth(&self) -> &Coefficients;
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<ReplicateData>;
}

/// Fresh samples from a simulation design.
#[derive(Debug, Clone)]
pub struct SimulationSource {
    design: SimulationDesign,
    truth: Coefficients,
}

impl SimulationSource {
    pub fn new(design: SimulationDesign) -> Result<Self> {
        design.validate()?;
        let truth = design.truth()?;
        Ok(Self { design, truth })
    }
}

impl ReplicateSource for SimulationSource {
    fn truth(&self) -> &Coefficients {
        &self.truth
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<ReplicateData> {
        let train = simulate(&self.design, self.design.n, rng)?;
        let test = simulate(&self.design, self.design.validation_n, rng)?;
        Ok(ReplicateData {
            train: train.data,
            test: test.data,
            test_labels: test.labels,
        })
    }
}

/// Subsamples of a fixed population whose reference fit is taken as the
/// truth. Test labels are the most probable components under that fit.
#[derive(Debug, Clone)]
pub struct SubsampleSource {
    population: Dataset,
    truth: Coefficients,
    labels: Vec<usize>,
    train_n: usize,
    test_n: usize,
}

impl SubsampleSource {
    pub fn new(population: Dataset, truth: Coefficients, train_n: usize, test_n: usize) -> Result<Self> {
        if train_n == 0 || train_n + test_n > population.n() {
            return Err(FmpreError::InvalidInput(format!(
                "cannot draw {train_n} training and {test_n} test rows from {}",
                population.n()
            )));
        }
        let labels = e_step(&population, &truth)?.map_assignment();
        Ok(Self {
            population,
            truth,
            labels,
            train_n,
            test_n,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

impl ReplicateSource for SubsampleSource {
    fn truth(&self) -> &Coefficients {
        &self.truth
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<ReplicateData> {
        let rows = sample(rng, self.population.n(), self.train_n + self.test_n).into_vec();
        let (train_rows, test_rows) = rows.split_at(self.train_n);
        Ok(ReplicateData {
            train: self.population.subset(train_rows)?,
            test: self.population.subset(test_rows)?,
            test_labels: test_rows.iter().map(|&r| self.labels[r]).collect(),
        })
    }
}

/// Metrics of one method in one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub beta: f64,
    pub alpha: f64,
    pub accuracy: f64,
}

impl MethodMetrics {
    pub fn get(&self, metric: &str) -> f64 {
        match metric {
            "beta" => self.beta,
            "alpha" => self.alpha,
            _ => self.accuracy,
        }
    }
}

/// Everything recorded for one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub results: BTreeMap<Method, std::result::Result<MethodMetrics, String>>,
}

/// Harness settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySettings {
    pub replicates: usize,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
    pub master_seed: u64,
    pub pipeline: PipelineOptions,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            replicates: 200,
            jobs: 1,
            master_seed: 20240601,
            pipeline: PipelineOptions::default(),
        }
    }
}

fn evaluate(
    fit: &Coefficients,
    truth: &Coefficients,
    data: &ReplicateData,
) -> Result<MethodMetrics> {
    let aligned = align_to(fit, truth)?;
    let n = data.train.n();
    Ok(MethodMetrics {
        beta: sqrt_mse(&aligned, truth, Block::Beta, n)?,
        alpha: sqrt_mse(&aligned, truth, Block::Alpha, n)?,
        accuracy: classification_accuracy(&aligned, &data.test, &data.test_labels)?,
    })
}

/// Runs replicate `index` with its own derived streams.
pub fn run_replicate(source: &dyn ReplicateSource, settings: &StudySettings, index: usize) -> ReplicateOutcome {
    let truth = source.truth();
    let mut data_rng = stream_rng(settings.master_seed, &[index as u64, 0]);
    let mut results = BTreeMap::new();
    let data = match source.draw(&mut data_rng) {
        Ok(d) => d,
        Err(e) => {
            for m in Method::ALL {
                results.insert(m, Err(format!("data generation: {e}")));
            }
            return ReplicateOutcome { index, results };
        }
    };
    let mut pipeline = settings.pipeline.clone();
    pipeline.sem.rng_seed = derive_seed(settings.master_seed, &[index as u64, 1]);
    let spec = match MixtureSpec::new(truth.components(), truth.reference()) {
        Ok(s) => s,
        Err(e) => {
            for m in Method::ALL {
                results.insert(m, Err(e.to_string()));
            }
            return ReplicateOutcome { index, results };
        }
    };
    let fits = fit_all(&data.train, &spec, &pipeline);
    for m in Method::ALL {
        let outcome = fits
            .get(m)
            .as_ref()
            .map_err(|e| e.to_string())
            .and_then(|fit| evaluate(&fit.psi_hat, truth, &data).map_err(|e| e.to_string()));
        results.insert(m, outcome);
    }
    ReplicateOutcome { index, results }
}

/// Replicate outcomes plus their summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub outcomes: Vec<ReplicateOutcome>,
    pub summaries: Vec<ReplicationSummary>,
}

impl StudyReport {
    /// Successful values of a metric for a method, in replicate order.
    pub fn values(&self, method: Method, metric: &str) -> Vec<f64> {
        self.outcomes
            .iter()
            .filter_map(|o| o.results.get(&method).and_then(|r| r.as_ref().ok()).map(|m| m.get(metric)))
            .collect()
    }

    pub fn failures(&self, method: Method) -> usize {
        self.outcomes
            .iter()
            .filter(|o| o.results.get(&method).is_none_or(|r| r.is_err()))
            .count()
    }

    /// Largest failure share over the methods.
    pub fn worst_failure_rate(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        Method::ALL
            .iter()
            .map(|&m| self.failures(m) as f64 / self.outcomes.len() as f64)
            .fold(0.0, f64::max)
    }

    pub fn summary(&self, method: Method, metric: &str) -> Option<&ReplicationSummary> {
        self.summaries
            .iter()
            .find(|s| s.method == method.label() && s.parameter_block == metric)
    }
}

/// Runs all replicates on a pool of `settings.jobs` threads.
pub fn run_study(source: &dyn ReplicateSource, settings: &StudySettings) -> Result<StudyReport> {
    if settings.replicates == 0 || settings.jobs == 0 {
        return Err(FmpreError::InvalidInput("replicates and jobs must be >= 1".into()));
    }
    settings.pipeline.sem.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.jobs)
        .build()
        .map_err(|e| FmpreError::InvalidInput(e.to_string()))?;
    let outcomes: Vec<ReplicateOutcome> = pool.install(|| {
        (0..settings.replicates)
            .into_par_iter()
            .map(|r| run_replicate(source, settings, r))
            .collect()
    });
    let mut report = StudyReport {
        outcomes,
        summaries: Vec::new(),
    };
    for m in Method::ALL {
        let failed = report.failures(m);
        for metric in METRICS {
            let values = report.values(m, metric);
            if values.is_empty() {
                continue;
            }
            report.summaries.push(summarize_replicates(m.label(), metric, &values, failed)?);
        }
    }
    Ok(report)
}

/// Simulation study for a design.
pub fn run_simulation_study(design: &SimulationDesign, settings: &StudySettings) -> Result<StudyReport> {
    run_study(&SimulationSource::new(design.clone())?, settings)
}

/// Configuration file of the `replicate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub design: SimulationDesign,
    #[serde(default)]
    pub study: StudySettings,
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| FmpreError::InvalidInput(e.to_string()))?;
        config.design.validate()?;
        config.study.pipeline.sem.validate()?;
        Ok(config)
    }
}
