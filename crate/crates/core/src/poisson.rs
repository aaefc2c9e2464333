//! Per-component Poisson regression: means, IRWLS workspaces and one
//! penalized IRWLS update.
//!
//! For the observations assigned to component `j` with current coefficients
//! `β⁽ᵗ⁾`, the update solves
//!
//! ```text
//! (X'WX + λI) b = X'Wz* − d·β̂_R
//! ```
//!
//! with `W = diag(μ)` and working response `z* = Xβ⁽ᵗ⁾ + (y − μ)/μ`. Maximum
//! likelihood is `λ = d = 0`, ridge is `d = 0`, and the Liu-type estimator
//! anchors the shrinkage on a previous ridge estimate `β̂_R`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FmpreError, Result};
use crate::linalg::{solve_penalized, weighted_cross, weighted_gram};
use crate::model::{Dataset, PartitionState};

pub const MU_MIN: f64 = 1e-300;
pub const MU_MAX: f64 = 1e300;

fn eta_bounds() -> (f64, f64) {
    (MU_MIN.ln(), MU_MAX.ln())
}

/// Linear predictor `x'β`, clamped so that `exp` of it stays inside
/// `[MU_MIN, MU_MAX]`.
pub fn log_mean(x: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let (lo, hi) = eta_bounds();
    x.dot(beta).clamp(lo, hi)
}

/// `exp(x'β)` clamped into `[MU_MIN, MU_MAX]`; the flag reports clamping.
pub fn poisson_mean(x: &DVector<f64>, beta: &DVector<f64>) -> (f64, bool) {
    let eta = x.dot(beta);
    let mu = eta.exp();
    if mu < MU_MIN {
        (MU_MIN, true)
    } else if mu > MU_MAX || mu.is_nan() {
        (MU_MAX, true)
    } else {
        (mu, false)
    }
}

/// Penalty attached to one IRWLS update.
#[derive(Debug, Clone, PartialEq)]
pub enum PenaltyKind {
    Ml,
    Ridge { lambda: f64 },
    /// Liu-type penalty with ridge parameter `lambda`, bias correction `d`
    /// and the ridge estimate `anchor` it shrinks towards.
    LiuType {
        lambda: f64,
        d: f64,
        anchor: DVector<f64>,
    },
}

impl PenaltyKind {
    pub fn lambda(&self) -> f64 {
        match self {
            PenaltyKind::Ml => 0.0,
            PenaltyKind::Ridge { lambda } | PenaltyKind::LiuType { lambda, .. } => *lambda,
        }
    }
}

/// Sign of the `d·anchor` term in the Liu-type right-hand side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LtSign {
    /// `X'Wz* − d·anchor`: the Newton step of the Liu-type penalized
    /// objective.
    #[default]
    Subtract,
    /// `X'Wz* + d·anchor`.
    Add,
}

/// Knobs shared by the component and gating solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Whether the first coefficient (the intercept) is penalized.
    pub penalize_intercept: bool,
    pub lt_sign: LtSign,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            penalize_intercept: true,
            lt_sign: LtSign::Subtract,
        }
    }
}

/// Diagonal penalty and right-hand-side shift of a penalized normal system.
pub(crate) fn penalty_terms(
    penalty: &PenaltyKind,
    dim: usize,
    settings: &SolverSettings,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let mask = DVector::from_fn(dim, |k, _| {
        if k == 0 && !settings.penalize_intercept {
            0.0
        } else {
            1.0
        }
    });
    match penalty {
        PenaltyKind::Ml => Ok((DVector::zeros(dim), DVector::zeros(dim))),
        PenaltyKind::Ridge { lambda } => {
            check_lambda(*lambda)?;
            Ok((&mask * *lambda, DVector::zeros(dim)))
        }
        PenaltyKind::LiuType { lambda, d, anchor } => {
            check_lambda(*lambda)?;
            if anchor.len() != dim {
                return Err(FmpreError::DimensionMismatch(format!(
                    "Liu-type anchor has length {} but {dim} coefficients",
                    anchor.len()
                )));
            }
            if !d.is_finite() {
                return Err(FmpreError::InvalidInput("bias correction d must be finite".into()));
            }
            let sign = match settings.lt_sign {
                LtSign::Subtract => 1.0,
                LtSign::Add => -1.0,
            };
            let shift = anchor.component_mul(&mask) * (sign * d);
            Ok((&mask * *lambda, shift))
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(FmpreError::InvalidInput(format!(
            "ridge parameter must be finite and >= 0, got {lambda}"
        )))
    }
}

/// IRWLS quantities of one component at the current coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentWorkspace {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub mu: DVector<f64>,
    /// Diagonal of `W`; equal to `mu`.
    pub weights: DVector<f64>,
    /// Working response `z* = Xβ⁽ᵗ⁾ + (y − μ)/μ`.
    pub working: DVector<f64>,
    pub beta_t: DVector<f64>,
    /// Number of means that hit the clamping window.
    pub clamped: usize,
}

impl ComponentWorkspace {
    pub fn new(x: DMatrix<f64>, y: &[u64], beta_t: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(FmpreError::DimensionMismatch(format!(
                "{} design rows for {} responses",
                x.nrows(),
                y.len()
            )));
        }
        if x.ncols() != beta_t.len() {
            return Err(FmpreError::DimensionMismatch(format!(
                "{} columns but {} coefficients",
                x.ncols(),
                beta_t.len()
            )));
        }
        let n = y.len();
        let y = DVector::from_iterator(n, y.iter().map(|&v| v as f64));
        let mut mu = DVector::zeros(n);
        let mut working = DVector::zeros(n);
        let mut clamped = 0;
        for i in 0..n {
            let row = x.row(i).transpose();
            let (m, was_clamped) = poisson_mean(&row, &beta_t);
            clamped += usize::from(was_clamped);
            mu[i] = m;
            working[i] = row.dot(&beta_t) + (y[i] - m) / m;
        }
        Ok(Self {
            x,
            y,
            weights: mu.clone(),
            mu,
            working,
            beta_t,
            clamped,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Workspace for component `j` over the rows the partition assigns to it.
pub fn build_workspace(
    data: &Dataset,
    part: &PartitionState,
    j: usize,
    beta_t: &DVector<f64>,
) -> Result<ComponentWorkspace> {
    if j >= part.components() {
        return Err(FmpreError::InvalidInput(format!("component {j} out of range")));
    }
    let rows = part.members(j);
    if rows.is_empty() {
        return Err(FmpreError::EmptyPartition { component: j });
    }
    let x = data.x().select_rows(&rows);
    let y: Vec<u64> = rows.iter().map(|&r| data.y()[r]).collect();
    ComponentWorkspace::new(x, &y, beta_t.clone())
}

/// One IRWLS update of a component's coefficients with default settings.
pub fn irwls_beta_step(ws: &ComponentWorkspace, penalty: &PenaltyKind) -> Result<DVector<f64>> {
    irwls_beta_step_with(ws, penalty, &SolverSettings::default())
}

pub fn irwls_beta_step_with(
    ws: &ComponentWorkspace,
    penalty: &PenaltyKind,
    settings: &SolverSettings,
) -> Result<DVector<f64>> {
    let (diag, shift) = penalty_terms(penalty, ws.x.ncols(), settings)?;
    let gram = weighted_gram(&ws.x, &ws.weights);
    let rhs = weighted_cross(&ws.x, &ws.weights, &ws.working) - shift;
    solve_penalized(&gram, &diag, &rhs, "Poisson component update")
}

/// Penalized per-component objective `Σ (y·η − μ) − penalty(β)`, without
/// terms constant in `β`.
pub fn q2_objective(
    ws: &ComponentWorkspace,
    beta: &DVector<f64>,
    penalty: &PenaltyKind,
    settings: &SolverSettings,
) -> Result<f64> {
    let (diag, shift) = penalty_terms(penalty, beta.len(), settings)?;
    let eta = &ws.x * beta;
    let fit: f64 = eta
        .iter()
        .zip(ws.y.iter())
        .map(|(&e, &y)| y * e - e.exp())
        .sum();
    let ridge: f64 = beta.iter().zip(diag.iter()).map(|(b, l)| l * b * b).sum::<f64>() / 2.0;
    Ok(fit - ridge - shift.dot(beta))
}

/// Gradient of [`q2_objective`]: `X'(y − μ(β)) − λβ − d·β̂_R`.
pub fn q2_gradient(
    ws: &ComponentWorkspace,
    beta: &DVector<f64>,
    penalty: &PenaltyKind,
) -> Result<DVector<f64>> {
    q2_gradient_with(ws, beta, penalty, &SolverSettings::default())
}

pub fn q2_gradient_with(
    ws: &ComponentWorkspace,
    beta: &DVector<f64>,
    penalty: &PenaltyKind,
    settings: &SolverSettings,
) -> Result<DVector<f64>> {
    let (diag, shift) = penalty_terms(penalty, beta.len(), settings)?;
    let mu = (&ws.x * beta).map(f64::exp);
    let residual = &ws.y - mu;
    Ok(ws.x.tr_mul(&residual) - diag.component_mul(beta) - shift)
}

/// Usual GLM starting point: weighted least squares of `log(y + 0.5)`
/// with weights `y + 0.5`.
pub fn glm_start(x: &DMatrix<f64>, y: &[u64]) -> Result<DVector<f64>> {
    let w = DVector::from_iterator(y.len(), y.iter().map(|&v| v as f64 + 0.5));
    let z = w.map(f64::ln);
    let gram = weighted_gram(x, &w);
    let rhs = weighted_cross(x, &w, &z);
    solve_penalized(&gram, &DVector::zeros(x.ncols()), &rhs, "GLM start")
}

/// Runs penalized IRWLS from the GLM starting point until the largest
/// coefficient change drops below `tol` or `max_iter` steps are taken.
pub fn fit_poisson_glm(
    x: &DMatrix<f64>,
    y: &[u64],
    penalty: &PenaltyKind,
    settings: &SolverSettings,
    max_iter: usize,
    tol: f64,
) -> Result<DVector<f64>> {
    let mut beta = glm_start(x, y)?;
    for _ in 0..max_iter {
        let ws = ComponentWorkspace::new(x.clone(), y, beta.clone())?;
        let next = irwls_beta_step_with(&ws, penalty, settings)?;
        let change = (&next - &beta).amax();
        beta = next;
        if change < tol {
            break;
        }
    }
    Ok(beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn simulate(rng: &mut ChaCha8Rng, n: usize, beta: &DVector<f64>) -> (DMatrix<f64>, Vec<u64>) {
        let p = beta.len();
        let x = DMatrix::from_fn(n, p, |_, c| if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let y = (0..n)
            .map(|i| {
                let mu = (x.row(i) * beta)[0].exp();
                Poisson::new(mu).unwrap().sample(rng) as u64
            })
            .collect();
        (x, y)
    }

    /// Newton–Raphson on the unpenalized Poisson log-likelihood, written
    /// against the score and information directly.
    fn newton_oracle(x: &DMatrix<f64>, y: &[u64]) -> DVector<f64> {
        let p = x.ncols();
        let mut beta = DVector::zeros(p);
        for _ in 0..200 {
            let mut score = DVector::zeros(p);
            let mut info = DMatrix::zeros(p, p);
            for i in 0..x.nrows() {
                let row = x.row(i).transpose();
                let mu = row.dot(&beta).exp();
                score += &row * (y[i] as f64 - mu);
                info += &row * row.transpose() * mu;
            }
            let step = info.lu().solve(&score).unwrap();
            beta += &step;
            if step.amax() < 1e-14 {
                break;
            }
        }
        beta
    }

    #[test]
    fn mean_examples() {
        assert_eq!(poisson_mean(&dvector![1.0, 0.0], &dvector![0.0, 5.0]), (1.0, false));
        assert_relative_eq!(poisson_mean(&dvector![1.0, 1.0], &dvector![1.0, 1.0]).0, 7.389_056_098_930_65, max_relative = 1e-15);
        // 0.85 - 2 - 2 = -3.15
        let eta: f64 = 1.0 * 0.85 + -2.0 + -2.0;
        assert_relative_eq!(
            poisson_mean(&dvector![1.0, 2.0, -1.0], &dvector![0.85, -1.0, 2.0]).0,
            eta.exp(),
            max_relative = 1e-15
        );
        assert_relative_eq!(eta, -3.15, epsilon = 1e-15);
    }

    #[test]
    fn mean_is_clamped() {
        assert_eq!(poisson_mean(&dvector![1.0], &dvector![800.0]), (MU_MAX, true));
        assert_eq!(poisson_mean(&dvector![1.0], &dvector![-800.0]), (MU_MIN, true));
    }

    #[test]
    fn workspace_at_zero_has_unit_weights() {
        let data = Dataset::new(
            vec![0, 3, 1],
            DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 1.0, -1.0, 1.0, 2.0]),
            DMatrix::from_element(3, 1, 1.0),
        )
        .unwrap();
        let part = PartitionState::from_assignment(vec![0, 0, 0], 1).unwrap();
        let ws = build_workspace(&data, &part, 0, &DVector::zeros(2)).unwrap();
        assert_eq!(ws.mu, DVector::from_element(3, 1.0));
        assert_eq!(ws.weights, ws.mu);
        assert_eq!(ws.working, dvector![-1.0, 2.0, 0.0]);
    }

    #[test]
    fn single_observation_working_response() {
        let ws = ComponentWorkspace::new(DMatrix::from_element(1, 1, 1.0), &[3], dvector![0.0]).unwrap();
        assert_eq!(ws.working[0], 2.0);
    }

    #[test]
    fn workspace_matches_elementwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let beta = dvector![0.3, -0.4, 0.8];
        let (x, y) = simulate(&mut rng, 40, &beta);
        let data = Dataset::new(y.clone(), x.clone(), DMatrix::from_element(40, 1, 1.0)).unwrap();
        let assignment: Vec<usize> = (0..40).map(|i| usize::from(i % 3 == 0)).collect();
        let part = PartitionState::from_assignment(assignment.clone(), 2).unwrap();
        let beta_t = dvector![0.1, 0.2, -0.3];
        let ws = build_workspace(&data, &part, 1, &beta_t).unwrap();
        let mut k = 0;
        for i in 0..40 {
            if assignment[i] != 1 {
                continue;
            }
            let mut eta = 0.0;
            for c in 0..3 {
                eta += x[(i, c)] * beta_t[c];
            }
            let mu = eta.exp();
            assert_eq!(ws.mu[k], mu);
            assert_eq!(ws.working[k], eta + (y[i] as f64 - mu) / mu);
            k += 1;
        }
        assert_eq!(k, ws.len());
    }

    #[test]
    fn empty_component_is_reported() {
        let data = Dataset::new(vec![1, 2], DMatrix::from_element(2, 1, 1.0), DMatrix::from_element(2, 1, 1.0)).unwrap();
        let part = PartitionState::from_assignment(vec![0, 0], 2).unwrap();
        let err = build_workspace(&data, &part, 1, &dvector![0.0]).unwrap_err();
        assert_eq!(err, FmpreError::EmptyPartition { component: 1 });
    }

    #[test]
    fn liu_type_with_zero_d_is_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, y) = simulate(&mut rng, 30, &dvector![0.5, 1.0]);
        let ws = ComponentWorkspace::new(x, &y, dvector![0.2, 0.4]).unwrap();
        let ridge = irwls_beta_step(&ws, &PenaltyKind::Ridge { lambda: 0.7 }).unwrap();
        let lt = irwls_beta_step(
            &ws,
            &PenaltyKind::LiuType { lambda: 0.7, d: 0.0, anchor: dvector![3.0, -2.0] },
        )
        .unwrap();
        assert_eq!(ridge, lt);
    }

    #[test]
    fn vanishing_ridge_matches_ml() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = simulate(&mut rng, 60, &dvector![0.5, 1.0]);
        let ws = ComponentWorkspace::new(x, &y, dvector![0.2, 0.4]).unwrap();
        let ml = irwls_beta_step(&ws, &PenaltyKind::Ml).unwrap();
        let ridge = irwls_beta_step(&ws, &PenaltyKind::Ridge { lambda: 1e-12 }).unwrap();
        assert_relative_eq!(ml, ridge, max_relative = 1e-8);
    }

    #[test]
    fn iterated_ml_matches_newton_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let (x, y) = simulate(&mut rng, 50, &dvector![0.4, 0.9]);
        let fitted = fit_poisson_glm(&x, &y, &PenaltyKind::Ml, &SolverSettings::default(), 100, 1e-13).unwrap();
        let oracle = newton_oracle(&x, &y);
        for k in 0..2 {
            assert_relative_eq!(fitted[k], oracle[k], max_relative = 1e-6);
        }
        let ws = ComponentWorkspace::new(x, &y, fitted.clone()).unwrap();
        assert!(q2_gradient(&ws, &fitted, &PenaltyKind::Ml).unwrap().norm() < 1e-6);
    }

    #[test]
    fn ridge_gradient_at_zero() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, -1.0, 1.0, 0.0]);
        let ws = ComponentWorkspace::new(x.clone(), &[2, 0, 5], DVector::zeros(2)).unwrap();
        let grad = q2_gradient(&ws, &DVector::zeros(2), &PenaltyKind::Ridge { lambda: 3.0 }).unwrap();
        let expected = x.transpose() * dvector![1.0, -1.0, 4.0];
        assert_eq!(grad, expected);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (x, y) = simulate(&mut rng, 25, &dvector![0.2, -0.5, 0.7]);
        let ws = ComponentWorkspace::new(x, &y, DVector::zeros(3)).unwrap();
        let settings = SolverSettings::default();
        let penalties = [
            PenaltyKind::Ml,
            PenaltyKind::Ridge { lambda: 0.8 },
            PenaltyKind::LiuType { lambda: 0.8, d: -0.6, anchor: dvector![0.3, 0.1, -0.2] },
        ];
        for penalty in &penalties {
            let beta = DVector::from_fn(3, |_, _| rng.random_range(-0.8..0.8));
            let grad = q2_gradient(&ws, &beta, penalty).unwrap();
            let h = 1e-5;
            for k in 0..3 {
                let mut up = beta.clone();
                up[k] += h;
                let mut down = beta.clone();
                down[k] -= h;
                let fd = (q2_objective(&ws, &up, penalty, &settings).unwrap()
                    - q2_objective(&ws, &down, penalty, &settings).unwrap())
                    / (2.0 * h);
                assert_relative_eq!(grad[k], fd, max_relative = 1e-5, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn unpenalized_intercept_is_left_alone() {
        let settings = SolverSettings { penalize_intercept: false, ..Default::default() };
        let (diag, shift) = penalty_terms(
            &PenaltyKind::LiuType { lambda: 2.0, d: 1.0, anchor: dvector![5.0, 5.0] },
            2,
            &settings,
        )
        .unwrap();
        assert_eq!(diag, dvector![0.0, 2.0]);
        assert_eq!(shift, dvector![0.0, 5.0]);
    }

    #[test]
    fn lt_sign_flag_flips_anchor_term() {
        let settings = SolverSettings { lt_sign: LtSign::Add, ..Default::default() };
        let (_, shift) = penalty_terms(
            &PenaltyKind::LiuType { lambda: 1.0, d: 2.0, anchor: dvector![1.0, -1.0] },
            2,
            &settings,
        )
        .unwrap();
        assert_eq!(shift, dvector![-2.0, 2.0]);
    }

    #[test]
    fn collinear_ml_step_is_singular_but_ridge_is_not() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 1.0, 2.0, 1.0, 2.0, 4.0, 1.0, 3.0, 6.0, 1.0, 4.0, 8.0]);
        let ws = ComponentWorkspace::new(x, &[1, 2, 3, 4], DVector::zeros(3)).unwrap();
        assert!(matches!(
            irwls_beta_step(&ws, &PenaltyKind::Ml),
            Err(FmpreError::SingularSystem { .. })
        ));
        assert!(irwls_beta_step(&ws, &PenaltyKind::Ridge { lambda: 0.1 }).is_ok());
    }
}
