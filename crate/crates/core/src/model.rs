//! Domain types shared by the estimators, and the observed and complete
//! log-likelihoods of the mixture.
//!
//! The mixture density of a count `y` with component regressors `x` and
//! gating concomitants `ω` is
//!
//! ```text
//! H(y | x, ω, Ψ) = Σ_j π_j(ω, α) · Poi(y | exp(x'β_j))
//! ```
//!
//! where `π_j` is a multinomial logit over the experts with one reference
//! class pinned at `α = 0`. Component indices are 0-based throughout the
//! crate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{FmpreError, Result};
use crate::gating::log_gating_row;
use crate::linalg::log_sum_exp;
use crate::poisson::log_mean;

/// Counts with their component design and gating design.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<u64>,
    x: DMatrix<f64>,
    omega: DMatrix<f64>,
    log_y_factorial: Vec<f64>,
}

impl Dataset {
    pub fn new(y: Vec<u64>, x: DMatrix<f64>, omega: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(FmpreError::InvalidInput("dataset needs n >= 1".into()));
        }
        if x.nrows() != n || omega.nrows() != n {
            return Err(FmpreError::DimensionMismatch(format!(
                "y has {n} rows, X has {}, Omega has {}",
                x.nrows(),
                omega.nrows()
            )));
        }
        if x.ncols() == 0 || omega.ncols() == 0 {
            return Err(FmpreError::DimensionMismatch(
                "X and Omega need at least one column".into(),
            ));
        }
        if x.iter().chain(omega.iter()).any(|v| !v.is_finite()) {
            return Err(FmpreError::InvalidInput(
                "design matrices contain non-finite values".into(),
            ));
        }
        let log_y_factorial = y.iter().map(|&v| ln_gamma(v as f64 + 1.0)).collect();
        Ok(Self {
            y,
            x,
            omega,
            log_y_factorial,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of component regressors (including the intercept column).
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Number of gating concomitants (including the intercept column).
    pub fn q(&self) -> usize {
        self.omega.ncols()
    }

    pub fn y(&self) -> &[u64] {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    /// `log(y_i!)`, via the log-gamma function.
    pub fn log_y_factorial(&self, i: usize) -> f64 {
        self.log_y_factorial[i]
    }

    /// The rows listed in `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n()) {
            return Err(FmpreError::InvalidInput(format!(
                "row {bad} out of range for n = {}",
                self.n()
            )));
        }
        let y = rows.iter().map(|&r| self.y[r]).collect();
        let x = self.x.select_rows(rows);
        let omega = self.omega.select_rows(rows);
        Self::new(y, x, omega)
    }
}

/// Mixture parameters `Ψ = (α, β)`.
///
/// `beta[j]` holds the Poisson coefficients of component `j` and `alpha[j]`
/// the gating coefficients of expert `j`; `alpha[reference]` is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    beta: Vec<DVector<f64>>,
    alpha: Vec<DVector<f64>>,
    reference: usize,
}

impl Coefficients {
    pub fn new(beta: Vec<DVector<f64>>, alpha: Vec<DVector<f64>>, reference: usize) -> Result<Self> {
        let j = beta.len();
        if j == 0 || alpha.len() != j {
            return Err(FmpreError::DimensionMismatch(format!(
                "{} beta vectors but {} alpha vectors",
                beta.len(),
                alpha.len()
            )));
        }
        if reference >= j {
            return Err(FmpreError::InvalidInput(format!(
                "reference class {reference} out of range for J = {j}"
            )));
        }
        let p = beta[0].len();
        let q = alpha[0].len();
        if beta.iter().any(|b| b.len() != p) || alpha.iter().any(|a| a.len() != q) {
            return Err(FmpreError::DimensionMismatch(
                "coefficient vectors have inconsistent lengths".into(),
            ));
        }
        if beta.iter().chain(alpha.iter()).any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(FmpreError::NumericalFailure(
                "coefficients contain non-finite values".into(),
            ));
        }
        if alpha[reference].iter().any(|&c| c != 0.0) {
            return Err(FmpreError::InvalidInput(format!(
                "alpha of the reference class {reference} must be zero"
            )));
        }
        Ok(Self {
            beta,
            alpha,
            reference,
        })
    }

    /// Builds coefficients from plain nested vectors.
    pub fn from_rows(beta: &[Vec<f64>], alpha: &[Vec<f64>], reference: usize) -> Result<Self> {
        Self::new(
            beta.iter().map(|b| DVector::from_column_slice(b)).collect(),
            alpha.iter().map(|a| DVector::from_column_slice(a)).collect(),
            reference,
        )
    }

    /// All-zero coefficients.
    pub fn zeros(components: usize, p: usize, q: usize, reference: usize) -> Result<Self> {
        Self::new(
            vec![DVector::zeros(p); components],
            vec![DVector::zeros(q); components],
            reference,
        )
    }

    pub fn components(&self) -> usize {
        self.beta.len()
    }

    pub fn p(&self) -> usize {
        self.beta[0].len()
    }

    pub fn q(&self) -> usize {
        self.alpha[0].len()
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn beta(&self) -> &[DVector<f64>] {
        &self.beta
    }

    pub fn alpha(&self) -> &[DVector<f64>] {
        &self.alpha
    }

    /// Relabels components so that new component `j` is old component
    /// `perm[j]`, keeping `reference` as the reference class. The gating
    /// vectors are shifted by a common vector so the new reference is zero,
    /// which leaves every gating probability unchanged.
    pub fn permuted(&self, perm: &[usize], reference: usize) -> Result<Self> {
        let j = self.components();
        let mut seen = vec![false; j];
        if perm.len() != j || perm.iter().any(|&k| k >= j || std::mem::replace(&mut seen[k], true))
        {
            return Err(FmpreError::InvalidInput(format!(
                "{perm:?} is not a permutation of 0..{j}"
            )));
        }
        let beta = perm.iter().map(|&k| self.beta[k].clone()).collect();
        let shift = self.alpha[perm[reference]].clone();
        let alpha = perm.iter().map(|&k| &self.alpha[k] - &shift).collect::<Vec<_>>();
        Self::new(beta, alpha, reference)
    }

    /// Plain nested-vector view for serialization.
    pub fn to_record(&self) -> CoefficientsRecord {
        CoefficientsRecord {
            beta: self.beta.iter().map(|b| b.iter().copied().collect()).collect(),
            alpha: self.alpha.iter().map(|a| a.iter().copied().collect()).collect(),
            reference_class: self.reference,
        }
    }
}

/// Serializable form of [`Coefficients`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientsRecord {
    pub beta: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    /// 0-based index of the expert whose gating vector is fixed at zero.
    pub reference_class: usize,
}

impl TryFrom<&CoefficientsRecord> for Coefficients {
    type Error = FmpreError;

    fn try_from(record: &CoefficientsRecord) -> Result<Self> {
        Coefficients::from_rows(&record.beta, &record.alpha, record.reference_class)
    }
}

/// Hard component assignment of every observation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionState {
    assignment: Vec<usize>,
    counts: Vec<usize>,
}

impl PartitionState {
    pub fn from_assignment(assignment: Vec<usize>, components: usize) -> Result<Self> {
        let mut counts = vec![0; components];
        for &z in &assignment {
            if z >= components {
                return Err(FmpreError::InvalidInput(format!(
                    "assignment {z} out of range for J = {components}"
                )));
            }
            counts[z] += 1;
        }
        Ok(Self { assignment, counts })
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn components(&self) -> usize {
        self.counts.len()
    }

    /// Rows assigned to component `j`, in ascending order.
    pub fn members(&self, j: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, &z)| (z == j).then_some(i))
            .collect()
    }

    pub fn first_empty(&self) -> Option<usize> {
        self.counts.iter().position(|&c| c == 0)
    }
}

/// Which iterate of a chain is reported as the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSelection {
    /// The post-burn-in iterate with the largest observed log-likelihood.
    #[default]
    BestLoglik,
    /// Coordinate-wise mean of post-burn-in iterates after label alignment
    /// to the best iterate.
    PostBurninMean,
}

/// How the S-step turns responsibilities into a partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentRule {
    /// One multinomial draw per observation (stochastic EM).
    #[default]
    Stochastic,
    /// Argmax of the responsibilities (classification EM). Deterministic
    /// given the starting values.
    HardArgmax,
}

/// Stopping rule and chain bookkeeping of the stochastic EM driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemOptions {
    /// Threshold on the absolute change of the observed log-likelihood.
    pub epsilon: f64,
    pub max_iters: usize,
    pub burn_in: usize,
    pub n_restarts: usize,
    pub estimate_selection: EstimateSelection,
    pub rng_seed: u64,
    pub assignment: AssignmentRule,
    /// Coordinate-descent tolerance for the gating update.
    pub inner_tol: f64,
    pub inner_max: usize,
}

impl Default for SemOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            max_iters: 500,
            burn_in: 100,
            n_restarts: 5,
            estimate_selection: EstimateSelection::BestLoglik,
            rng_seed: 0,
            assignment: AssignmentRule::Stochastic,
            inner_tol: 1e-8,
            inner_max: 50,
        }
    }
}

impl SemOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(FmpreError::InvalidInput("epsilon must be > 0".into()));
        }
        if self.max_iters == 0 || self.n_restarts == 0 {
            return Err(FmpreError::InvalidInput(
                "max_iters and n_restarts must be >= 1".into(),
            ));
        }
        if self.burn_in >= self.max_iters {
            return Err(FmpreError::InvalidInput(
                "burn_in must be smaller than max_iters".into(),
            ));
        }
        Ok(())
    }
}

/// Estimation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ml,
    Ridge,
    #[serde(rename = "lt")]
    LiuType,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ml, Method::Ridge, Method::LiuType];

    pub fn label(self) -> &'static str {
        match self {
            Method::Ml => "ML",
            Method::Ridge => "Ridge",
            Method::LiuType => "LT",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = FmpreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ml" => Ok(Method::Ml),
            "ridge" => Ok(Method::Ridge),
            "lt" | "liu" | "liu-type" => Ok(Method::LiuType),
            other => Err(FmpreError::InvalidInput(format!("unknown method {other}"))),
        }
    }
}

/// Per-component ridge parameters and Liu-type bias corrections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningParams {
    pub lambda_beta: Vec<f64>,
    pub lambda_alpha: Vec<f64>,
    pub d_beta: Vec<f64>,
    pub d_alpha: Vec<f64>,
    /// Components whose `lambda_beta` hit the cap.
    pub capped_beta: Vec<bool>,
    /// Experts whose `lambda_alpha` hit the cap (always true for the
    /// reference class).
    pub capped_alpha: Vec<bool>,
}

impl TuningParams {
    pub fn validate(&self) -> Result<()> {
        let j = self.lambda_beta.len();
        if [self.lambda_alpha.len(), self.d_beta.len(), self.d_alpha.len()]
            .iter()
            .any(|&l| l != j)
        {
            return Err(FmpreError::DimensionMismatch(
                "tuning vectors have inconsistent lengths".into(),
            ));
        }
        if self
            .lambda_beta
            .iter()
            .chain(&self.lambda_alpha)
            .any(|&l| !l.is_finite() || l <= 0.0)
        {
            return Err(FmpreError::InvalidInput(
                "ridge parameters must be finite and > 0".into(),
            ));
        }
        if self.d_beta.iter().chain(&self.d_alpha).any(|d| !d.is_finite()) {
            return Err(FmpreError::InvalidInput(
                "bias corrections must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of a stochastic EM fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub method: Method,
    pub psi_hat: Coefficients,
    /// Observed log-likelihood after each iteration of the selected chain.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations_run: usize,
    pub tuning: Option<TuningParams>,
    /// 1-based iteration the estimate came from (0 = the initial value);
    /// for the post-burn-in mean this is the alignment anchor.
    pub selected_iteration: usize,
    /// Observed log-likelihood of `psi_hat`.
    pub loglik: f64,
    pub restarts_failed: usize,
}

/// Log of the Poisson probability of `y` given log-mean `eta`.
pub fn log_poisson(y: u64, eta: f64, log_y_factorial: f64) -> f64 {
    let mu = eta.exp();
    y as f64 * eta - mu - log_y_factorial
}

fn check_dimensions(data: &Dataset, psi: &Coefficients) -> Result<()> {
    if psi.p() != data.p() || psi.q() != data.q() {
        return Err(FmpreError::DimensionMismatch(format!(
            "coefficients are (p={}, q={}) but data is (p={}, q={})",
            psi.p(),
            psi.q(),
            data.p(),
            data.q()
        )));
    }
    Ok(())
}

/// Joint log-densities `log π_ij + log Poi(y_i | μ_ij)` for one observation.
pub(crate) fn joint_log_density_row(data: &Dataset, psi: &Coefficients, i: usize) -> Vec<f64> {
    let omega_row = data.omega().row(i);
    let x_row = data.x().row(i);
    let log_pi = log_gating_row(&omega_row.transpose(), psi.alpha());
    psi.beta()
        .iter()
        .zip(log_pi)
        .map(|(beta, lp)| {
            let eta = log_mean(&x_row.transpose(), beta);
            lp + log_poisson(data.y()[i], eta, data.log_y_factorial(i))
        })
        .collect()
}

/// Observed-data log-likelihood `Σ_i log Σ_j π_j(ω_i) Poi(y_i | μ_j(x_i))`.
pub fn observed_loglik(data: &Dataset, psi: &Coefficients) -> Result<f64> {
    check_dimensions(data, psi)?;
    let total: f64 = (0..data.n())
        .map(|i| log_sum_exp(&joint_log_density_row(data, psi, i)))
        .sum();
    if !total.is_finite() {
        return Err(FmpreError::NumericalFailure(
            "observed log-likelihood is not finite".into(),
        ));
    }
    Ok(total)
}

/// Complete-data log-likelihood under a hard partition.
pub fn complete_loglik(data: &Dataset, psi: &Coefficients, part: &PartitionState) -> Result<f64> {
    check_dimensions(data, psi)?;
    if part.assignment().len() != data.n() || part.components() != psi.components() {
        return Err(FmpreError::DimensionMismatch(
            "partition does not match data and coefficients".into(),
        ));
    }
    let total: f64 = (0..data.n())
        .map(|i| joint_log_density_row(data, psi, i)[part.assignment()[i]])
        .sum();
    if !total.is_finite() {
        return Err(FmpreError::NumericalFailure(
            "complete log-likelihood is not finite".into(),
        ));
    }
    Ok(total)
}
