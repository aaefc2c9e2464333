//! The three-stage estimation pipeline: ML, then ridge tuned on the ML
//! fit, then Liu-type tuned on the ridge fit.

use serde::{Deserialize, Serialize};

use crate::error::{FmpreError, Result};
use crate::model::{Dataset, FitResult, Method, PartitionState, SemOptions};
use crate::poisson::SolverSettings;
use crate::rng::derive_seed;
use crate::sem::{e_step, run_sem, Initialization, MixtureSpec, PenaltyPlan};
use crate::tuning::{estimate_ridge_lambdas, tune_liu_type_with, TuningOptions};

/// Options shared by the three stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub sem: SemOptions,
    pub settings: SolverSettings,
    /// How the ridge chains use the ML estimate.
    pub ridge_start: StageStart,
    /// How the Liu-type chains use the ridge estimate they shrink towards.
    pub lt_start: StageStart,
    pub tuning: TuningOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            sem: SemOptions::default(),
            settings: SolverSettings::default(),
            ridge_start: StageStart::Anchored,
            lt_start: StageStart::Anchored,
            tuning: TuningOptions::default(),
        }
    }
}

/// Starting values of a stage relative to the previous stage's estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStart {
    /// Every chain starts from the spec's own initialization.
    Fresh,
    /// Every chain starts at the previous estimate.
    Warm,
    /// One chain starts at the previous estimate, the others fresh with
    /// experts relabelled to match it.
    #[default]
    Anchored,
}

fn stage_options(opts: &PipelineOptions, method: Method) -> SemOptions {
    let stage = match method {
        Method::Ml => 0,
        Method::Ridge => 1,
        Method::LiuType => 2,
    };
    SemOptions {
        rng_seed: derive_seed(opts.sem.rng_seed, &[stage]),
        ..opts.sem.clone()
    }
}

fn stage_spec(spec: &MixtureSpec, previous: &FitResult, start: StageStart) -> MixtureSpec {
    let psi = previous.psi_hat.clone();
    match start {
        StageStart::Fresh => spec.clone(),
        StageStart::Warm => spec.clone().with_init(Initialization::Given(psi)),
        StageStart::Anchored => spec.clone().with_init(Initialization::Anchored(psi)),
    }
}

pub fn fit_ml(data: &Dataset, spec: &MixtureSpec, opts: &PipelineOptions) -> Result<FitResult> {
    let plan = PenaltyPlan::ml(spec.components);
    run_sem(data, spec, &stage_options(opts, Method::Ml), &plan, &opts.settings)
}

/// Ridge fit with `λ` plug-ins from the ML estimate.
pub fn fit_ridge(data: &Dataset, spec: &MixtureSpec, ml: &FitResult, opts: &PipelineOptions) -> Result<FitResult> {
    let tuning = estimate_ridge_lambdas(&ml.psi_hat);
    let plan = PenaltyPlan::ridge(&tuning)?;
    run_sem(data, &stage_spec(spec, ml, opts.ridge_start), &stage_options(opts, Method::Ridge), &plan, &opts.settings)
}

/// Most probable partition under a fit.
pub fn map_partition(data: &Dataset, fit: &FitResult) -> Result<PartitionState> {
    let assignment = e_step(data, &fit.psi_hat)?.map_assignment();
    PartitionState::from_assignment(assignment, fit.psi_hat.components())
}

/// Liu-type fit with `λ` and `d` tuned on the ridge estimate, shrinking
/// towards it.
pub fn fit_liu_type(
    data: &Dataset,
    spec: &MixtureSpec,
    ridge: &FitResult,
    opts: &PipelineOptions,
) -> Result<FitResult> {
    let part = map_partition(data, ridge)?;
    let tuning = tune_liu_type_with(data, &part, &ridge.psi_hat, &opts.tuning)?;
    let plan = PenaltyPlan::liu_type(&tuning, &ridge.psi_hat)?;
    run_sem(data, &stage_spec(spec, ridge, opts.lt_start), &stage_options(opts, Method::LiuType), &plan, &opts.settings)
}

/// Outcome of every stage; a failed stage makes the later ones fail too.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodFits {
    pub ml: Result<FitResult>,
    pub ridge: Result<FitResult>,
    pub lt: Result<FitResult>,
}

impl MethodFits {
    pub fn get(&self, method: Method) -> &Result<FitResult> {
        match method {
            Method::Ml => &self.ml,
            Method::Ridge => &self.ridge,
            Method::LiuType => &self.lt,
        }
    }
}

fn upstream(method: Method, err: &FmpreError) -> FmpreError {
    FmpreError::FitFailed {
        attempts: 0,
        diagnostics: format!("{} stage failed: {err}", method.label()),
    }
}

pub fn fit_all(data: &Dataset, spec: &MixtureSpec, opts: &PipelineOptions) -> MethodFits {
    let ml = fit_ml(data, spec, opts);
    let ridge = match &ml {
        Ok(fit) => fit_ridge(data, spec, fit, opts),
        Err(e) => Err(upstream(Method::Ml, e)),
    };
    let lt = match &ridge {
        Ok(fit) => fit_liu_type(data, spec, fit, opts),
        Err(e) => Err(upstream(Method::Ridge, e)),
    };
    MethodFits { ml, ridge, lt }
}

/// Runs the stages needed for `method` and returns its fit.
pub fn fit_method(data: &Dataset, spec: &MixtureSpec, method: Method, opts: &PipelineOptions) -> Result<FitResult> {
    let ml = fit_ml(data, spec, opts)?;
    if method == Method::Ml {
        return Ok(ml);
    }
    let ridge = fit_ridge(data, spec, &ml, opts)?;
    if method == Method::Ridge {
        return Ok(ridge);
    }
    fit_liu_type(data, spec, &ridge, opts)
}

/// Free parameters of a `J`-expert model: `Jp` regression coefficients and
/// `(J − 1)q` gating coefficients.
pub fn parameter_count(components: usize, p: usize, q: usize) -> usize {
    components * p + components.saturating_sub(1) * q
}

/// `−2ℓ + k log n`.
pub fn bic(loglik: f64, components: usize, p: usize, q: usize, n: usize) -> f64 {
    -2.0 * loglik + parameter_count(components, p, q) as f64 * (n as f64).ln()
}

/// One row of a BIC scan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BicEntry {
    pub components: usize,
    pub loglik: Option<f64>,
    pub bic: Option<f64>,
    pub error: Option<String>,
}

/// Fits `J = 1..=max_components` with the last class as gating reference and
/// reports each BIC; fits that fail are kept with their error.
pub fn bic_scan(data: &Dataset, max_components: usize, method: Method, opts: &PipelineOptions) -> Result<Vec<BicEntry>> {
    if max_components == 0 {
        return Err(FmpreError::InvalidInput("BIC scan needs J_max >= 1".into()));
    }
    let mut entries = Vec::with_capacity(max_components);
    for j in 1..=max_components {
        let spec = MixtureSpec::new(j, j - 1)?;
        let entry = match fit_method(data, &spec, method, opts) {
            Ok(fit) => BicEntry {
                components: j,
                loglik: Some(fit.loglik),
                bic: Some(bic(fit.loglik, j, data.p(), data.q(), data.n())),
                error: None,
            },
            Err(e) => BicEntry {
                components: j,
                loglik: None,
                bic: None,
                error: Some(e.to_string()),
            },
        };
        entries.push(entry);
    }
    Ok(entries)
}

/// Component count with the smallest BIC among successful fits.
pub fn best_by_bic(entries: &[BicEntry]) -> Option<usize> {
    entries
        .iter()
        .filter_map(|e| e.bic.map(|b| (e.components, b)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(j, _)| j)
}
