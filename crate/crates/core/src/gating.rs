//! Multinomial-logit gating network.
//!
//! Expert `j` is chosen with probability `exp(ω'α_j) / Σ_k exp(ω'α_k)`,
//! where the reference class has `α = 0`. The gating coefficients are
//! updated class by class with one penalized IRWLS step on the binary
//! working problem `1{z = j}` against `π_j`, holding the other classes
//! fixed, and sweeps are repeated until the coefficients settle.

use nalgebra::{DMatrix, DVector};

use crate::error::{FmpreError, Result};
use crate::linalg::{log_sum_exp, solve_penalized, weighted_cross, weighted_gram};
use crate::model::{Dataset, PartitionState};
use crate::poisson::{penalty_terms, PenaltyKind, SolverSettings};

/// Floor applied to `π(1 − π)` style weights.
pub const WEIGHT_FLOOR: f64 = 1e-10;

const MAX_HALVINGS: usize = 10;

/// Log gating probabilities of one covariate row.
pub fn log_gating_row(omega_row: &DVector<f64>, alpha: &[DVector<f64>]) -> Vec<f64> {
    let scores: Vec<f64> = alpha.iter().map(|a| omega_row.dot(a)).collect();
    let norm = log_sum_exp(&scores);
    scores.iter().map(|s| s - norm).collect()
}

/// `n × J` matrix of gating probabilities.
pub fn gating_probabilities(omega: &DMatrix<f64>, alpha: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if let Some(a) = alpha.iter().find(|a| a.len() != omega.ncols()) {
        return Err(FmpreError::DimensionMismatch(format!(
            "gating vector of length {} for {} gating covariates",
            a.len(),
            omega.ncols()
        )));
    }
    let mut probs = DMatrix::zeros(omega.nrows(), alpha.len());
    for i in 0..omega.nrows() {
        let row = omega.row(i).transpose();
        for (j, lp) in log_gating_row(&row, alpha).into_iter().enumerate() {
            probs[(i, j)] = lp.exp();
        }
    }
    Ok(probs)
}

/// Binary IRWLS quantities for one non-reference class.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingWorkspace {
    pub class: usize,
    pub omega: DMatrix<f64>,
    /// `π_j` at the current coefficients.
    pub probs: DVector<f64>,
    /// `1{z_i = j} − π_ij`.
    pub residual: DVector<f64>,
    /// `π(1 − π)` floored at [`WEIGHT_FLOOR`].
    pub weights: DVector<f64>,
    /// Working response `Ωα_j + U / W`.
    pub working: DVector<f64>,
    pub alpha_t: DVector<f64>,
}

impl GatingWorkspace {
    pub fn new(
        omega: &DMatrix<f64>,
        assignment: &[usize],
        alpha: &[DVector<f64>],
        class: usize,
    ) -> Result<Self> {
        if assignment.len() != omega.nrows() {
            return Err(FmpreError::DimensionMismatch(format!(
                "{} labels for {} rows",
                assignment.len(),
                omega.nrows()
            )));
        }
        if class >= alpha.len() {
            return Err(FmpreError::InvalidInput(format!("class {class} out of range")));
        }
        let probs_all = gating_probabilities(omega, alpha)?;
        let probs = probs_all.column(class).into_owned();
        let n = omega.nrows();
        let residual = DVector::from_fn(n, |i, _| f64::from(u8::from(assignment[i] == class)) - probs[i]);
        let weights = probs.map(|p| (p * (1.0 - p)).clamp(WEIGHT_FLOOR, 1.0 - WEIGHT_FLOOR));
        let linear = omega * &alpha[class];
        let working = DVector::from_fn(n, |i, _| linear[i] + residual[i] / weights[i]);
        Ok(Self {
            class,
            omega: omega.clone(),
            probs,
            residual,
            weights,
            working,
            alpha_t: alpha[class].clone(),
        })
    }
}

/// Workspace for gating class `j` under a partition.
pub fn build_gating_workspace(
    data: &Dataset,
    part: &PartitionState,
    alpha: &[DVector<f64>],
    j: usize,
) -> Result<GatingWorkspace> {
    GatingWorkspace::new(data.omega(), part.assignment(), alpha, j)
}

/// One penalized IRWLS update of a single gating vector.
pub fn irwls_alpha_step(
    ws: &GatingWorkspace,
    penalty: &PenaltyKind,
    settings: &SolverSettings,
) -> Result<DVector<f64>> {
    let (diag, shift) = penalty_terms(penalty, ws.omega.ncols(), settings)?;
    let gram = weighted_gram(&ws.omega, &ws.weights);
    let rhs = weighted_cross(&ws.omega, &ws.weights, &ws.working) - shift;
    solve_penalized(&gram, &diag, &rhs, "gating update")
}

/// Penalized gating objective: the multinomial log-likelihood of the labels
/// minus the penalty of every non-reference class, without terms constant
/// in `α`.
pub fn q1_objective(
    omega: &DMatrix<f64>,
    assignment: &[usize],
    alpha: &[DVector<f64>],
    penalties: &[PenaltyKind],
    reference: usize,
    settings: &SolverSettings,
) -> Result<f64> {
    check_penalties(alpha, penalties)?;
    let mut total = 0.0;
    for (i, &z) in assignment.iter().enumerate() {
        let row = omega.row(i).transpose();
        total += log_gating_row(&row, alpha)[z];
    }
    for (j, (a, pen)) in alpha.iter().zip(penalties).enumerate() {
        if j == reference {
            continue;
        }
        let (diag, shift) = penalty_terms(pen, a.len(), settings)?;
        total -= a.iter().zip(diag.iter()).map(|(v, l)| l * v * v).sum::<f64>() / 2.0;
        total -= shift.dot(a);
    }
    Ok(total)
}

/// Gradient of [`q1_objective`] with respect to `α_j`:
/// `Ω'(1{z = j} − π_j) − λ*α_j − d*·α̂_R`.
pub fn q1_gradient(
    omega: &DMatrix<f64>,
    assignment: &[usize],
    alpha: &[DVector<f64>],
    class: usize,
    penalty: &PenaltyKind,
    settings: &SolverSettings,
) -> Result<DVector<f64>> {
    let ws = GatingWorkspace::new(omega, assignment, alpha, class)?;
    let (diag, shift) = penalty_terms(penalty, omega.ncols(), settings)?;
    Ok(omega.tr_mul(&ws.residual) - diag.component_mul(&alpha[class]) - shift)
}

fn check_penalties(alpha: &[DVector<f64>], penalties: &[PenaltyKind]) -> Result<()> {
    if penalties.len() != alpha.len() {
        return Err(FmpreError::DimensionMismatch(format!(
            "{} gating penalties for {} classes",
            penalties.len(),
            alpha.len()
        )));
    }
    Ok(())
}

/// Bookkeeping of a coordinate-descent run.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateReport {
    pub sweeps: usize,
    pub converged: bool,
    /// Class updates that were discarded because no step length improved
    /// the penalized objective.
    pub rejected_updates: usize,
}

/// Cycles the per-class IRWLS update over the non-reference classes until
/// the largest coefficient change in a sweep falls below `tol`.
///
/// Each update is accepted at the largest step length `2^-k`, `k <= 10`,
/// that does not decrease the penalized objective; otherwise the class
/// keeps its current coefficients.
#[allow(clippy::too_many_arguments)]
pub fn coordinate_descent_alphas(
    omega: &DMatrix<f64>,
    assignment: &[usize],
    alpha: &[DVector<f64>],
    reference: usize,
    penalties: &[PenaltyKind],
    settings: &SolverSettings,
    tol: f64,
    max_sweeps: usize,
) -> Result<(Vec<DVector<f64>>, CoordinateReport)> {
    check_penalties(alpha, penalties)?;
    if reference >= alpha.len() {
        return Err(FmpreError::InvalidInput(format!("reference class {reference} out of range")));
    }
    let mut current = alpha.to_vec();
    let mut objective = q1_objective(omega, assignment, &current, penalties, reference, settings)?;
    let mut report = CoordinateReport {
        sweeps: 0,
        converged: false,
        rejected_updates: 0,
    };
    for _ in 0..max_sweeps {
        report.sweeps += 1;
        let mut largest = 0.0f64;
        for j in 0..current.len() {
            if j == reference {
                continue;
            }
            let ws = GatingWorkspace::new(omega, assignment, &current, j)?;
            let proposal = irwls_alpha_step(&ws, &penalties[j], settings)?;
            let direction = &proposal - &current[j];
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                let mut trial = current.clone();
                trial[j] = &current[j] + &direction * step;
                let value = q1_objective(omega, assignment, &trial, penalties, reference, settings)?;
                if value.is_finite() && value >= objective - 1e-12 * objective.abs().max(1.0) {
                    largest = largest.max((&direction * step).amax());
                    current = trial;
                    objective = value;
                    accepted = true;
                    break;
                }
                step /= 2.0;
            }
            if !accepted {
                report.rejected_updates += 1;
            }
        }
        if largest < tol {
            report.converged = true;
            break;
        }
    }
    Ok((current, report))
}
