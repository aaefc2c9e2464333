//! Plug-in ridge parameters and Liu-type bias corrections.
//!
//! Ridge parameters use `λ̂_j = p / β̂_j'β̂_j` and `λ̂*_j = q / α̂_j'α̂_j`.
//! The bias correction `d_j` minimizes the plug-in mean squared error of
//! the Liu-type estimator,
//!
//! ```text
//! MSE(d) = tr[B A Bᵀ] + ‖B X'Wμ − β‖²,   B = (A + λI)⁻¹ (A − dI) (A + λI)⁻¹,
//! ```
//!
//! with `A = X'WX` and the ridge estimate standing in for the truth. `B` is
//! affine in `d`, so `MSE` is an exact quadratic and its minimizer has a
//! closed form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FmpreError, Result};
use crate::gating::{gating_probabilities, WEIGHT_FLOOR};
use crate::linalg::weighted_gram;
use crate::model::{Coefficients, Dataset, PartitionState, TuningParams};

/// Cap applied to plug-in ridge parameters.
pub const LAMBDA_MAX: f64 = 1e6;

/// Grid size of the fallback search when the MSE is not strictly convex.
pub const FALLBACK_GRID: usize = 512;

/// Half-width of the default `d` search interval in units of `λ`.
pub const D_RANGE_SCALE: f64 = 10.0;

fn plug_in(dim: usize, coef: &DVector<f64>) -> (f64, bool) {
    let norm2 = coef.norm_squared();
    let lambda = dim as f64 / norm2;
    if !lambda.is_finite() || lambda > LAMBDA_MAX {
        (LAMBDA_MAX, true)
    } else {
        (lambda, false)
    }
}

/// Ridge parameters from a source estimate, with zero bias corrections.
pub fn estimate_ridge_lambdas(source: &Coefficients) -> TuningParams {
    let (lambda_beta, capped_beta) = source.beta().iter().map(|b| plug_in(source.p(), b)).unzip();
    let (lambda_alpha, capped_alpha) = source.alpha().iter().map(|a| plug_in(source.q(), a)).unzip();
    let j = source.components();
    TuningParams {
        lambda_beta,
        lambda_alpha,
        d_beta: vec![0.0; j],
        d_alpha: vec![0.0; j],
        capped_beta,
        capped_alpha,
    }
}

/// Plug-in MSE of a Liu-type update as a function of `d`, with everything
/// that does not depend on `d` precomputed.
#[derive(Debug, Clone)]
pub struct LtMse {
    gram: DMatrix<f64>,
    inverse: DMatrix<f64>,
    cross: DVector<f64>,
    plugin: DVector<f64>,
}

impl LtMse {
    /// `design` and `weights` give `A = X'WX`; `mean` is the plug-in mean
    /// vector entering `X'Wμ` and `plugin` the coefficient vector taken as
    /// the truth.
    pub fn new(
        design: &DMatrix<f64>,
        weights: &DVector<f64>,
        lambda: f64,
        plugin: &DVector<f64>,
        mean: &DVector<f64>,
    ) -> Result<Self> {
        if !lambda.is_finite() || lambda <= 0.0 {
            return Err(FmpreError::TuningFailed(format!("ridge parameter {lambda} is not positive")));
        }
        if design.nrows() != weights.len() || design.nrows() != mean.len() || design.ncols() != plugin.len() {
            return Err(FmpreError::DimensionMismatch("MSE inputs have inconsistent shapes".into()));
        }
        let gram = weighted_gram(design, weights);
        let mut shifted = gram.clone();
        for k in 0..shifted.nrows() {
            shifted[(k, k)] += lambda;
        }
        let inverse = shifted
            .cholesky()
            .ok_or_else(|| FmpreError::TuningFailed("A + λI is not positive definite".into()))?
            .inverse();
        let cross = design.tr_mul(&weights.component_mul(mean));
        Ok(Self {
            gram,
            inverse,
            cross,
            plugin: plugin.clone(),
        })
    }

    /// `B(d) = (A + λI)⁻¹ (A − dI) (A + λI)⁻¹`.
    pub fn shrinkage(&self, d: f64) -> DMatrix<f64> {
        let mut middle = self.gram.clone();
        for k in 0..middle.nrows() {
            middle[(k, k)] -= d;
        }
        &self.inverse * middle * &self.inverse
    }

    pub fn variance_trace(&self, d: f64) -> f64 {
        let b = self.shrinkage(d);
        (&b * &self.gram * b.transpose()).trace()
    }

    pub fn squared_bias(&self, d: f64) -> f64 {
        (self.shrinkage(d) * &self.cross - &self.plugin).norm_squared()
    }

    pub fn eval(&self, d: f64) -> f64 {
        self.variance_trace(d) + self.squared_bias(d)
    }
}

/// Plug-in MSE of the Liu-type expert update at bias correction `d`.
pub fn lt_mse_beta(
    d: f64,
    x: &DMatrix<f64>,
    w: &DVector<f64>,
    lambda: f64,
    beta_plugin: &DVector<f64>,
    mu_plugin: &DVector<f64>,
) -> Result<f64> {
    Ok(LtMse::new(x, w, lambda, beta_plugin, mu_plugin)?.eval(d))
}

/// Plug-in MSE of the Liu-type gating update at bias correction `d*`.
pub fn lt_mse_alpha(
    d_star: f64,
    omega: &DMatrix<f64>,
    wg: &DVector<f64>,
    lambda_star: f64,
    alpha_plugin: &DVector<f64>,
    pi_plugin: &DVector<f64>,
) -> Result<f64> {
    Ok(LtMse::new(omega, wg, lambda_star, alpha_plugin, pi_plugin)?.eval(d_star))
}

/// Quadratic `a d² + b d + c` and the chosen minimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseQuadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d_opt: f64,
}

impl MseQuadratic {
    pub fn eval(&self, d: f64) -> f64 {
        (self.a * d + self.b) * d + self.c
    }
}

/// Coefficients of the parabola through three points with distinct
/// abscissae.
pub fn fit_quadratic(points: [(f64, f64); 3]) -> (f64, f64, f64) {
    let [(x0, y0), (x1, y1), (x2, y2)] = points;
    let d01 = (y1 - y0) / (x1 - x0);
    let d12 = (y2 - y1) / (x2 - x1);
    let a = (d12 - d01) / (x2 - x0);
    let b = d01 - a * (x0 + x1);
    let c = y0 - (a * x0 + b) * x0;
    (a, b, c)
}

/// Minimizes a quadratic `mse` over `range`: the vertex, clipped to the
/// range, when the leading coefficient exceeds `1e-14`, otherwise the best
/// point of a 512-point grid.
pub fn optimize_bias_correction(mse: impl Fn(f64) -> f64, range: (f64, f64)) -> Result<MseQuadratic> {
    let (lo, hi) = range;
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(FmpreError::TuningFailed(format!("invalid search interval [{lo}, {hi}]")));
    }
    let mid = 0.5 * (lo + hi);
    let xs = [lo, mid, hi];
    let ys = xs.map(&mse);
    if ys.iter().any(|v| !v.is_finite()) {
        return Err(FmpreError::TuningFailed("MSE is not finite".into()));
    }
    let (a, b, c) = fit_quadratic([(xs[0], ys[0]), (xs[1], ys[1]), (xs[2], ys[2])]);
    let d_opt = if a > 1e-14 {
        (-b / (2.0 * a)).clamp(lo, hi)
    } else {
        let mut best = (f64::INFINITY, lo);
        for k in 0..FALLBACK_GRID {
            let d = lo + (hi - lo) * k as f64 / (FALLBACK_GRID - 1) as f64;
            let v = mse(d);
            if !v.is_finite() {
                return Err(FmpreError::TuningFailed("MSE is not finite".into()));
            }
            if v < best.0 {
                best = (v, d);
            }
        }
        best.1
    };
    Ok(MseQuadratic { a, b, c, d_opt })
}

/// Default search interval `[−10λ, 10λ]`.
pub fn default_d_range(lambda: f64) -> (f64, f64) {
    (-D_RANGE_SCALE * lambda, D_RANGE_SCALE * lambda)
}

/// Mean vector entering the bias term `‖B X'W m − θ‖²` of the plug-in MSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MseMeanTerm {
    /// `m = μ(β̂_R)` for experts and `m = π_j(α̂_R)` for the gating.
    MeanFunction,
    /// `m = Xβ̂_R` (and `Ωα̂_R`), so that `X'Wm = Aβ̂_R` is the expectation
    /// of `X'Wz*` under the plug-in.
    #[default]
    LinearPredictor,
}

/// Options of the Liu-type tuning step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningOptions {
    pub mean_term: MseMeanTerm,
    /// Half-width of the `d` search interval in units of `λ`.
    pub d_range_scale: f64,
    /// Report `d* + λ`, the value at which the penalized update reproduces
    /// the estimator `(A+λI)⁻¹(A−d*I)β̂_R` whose MSE was minimized.
    pub match_update: bool,
}

impl Default for TuningOptions {
    fn default() -> Self {
        Self {
            mean_term: MseMeanTerm::default(),
            d_range_scale: D_RANGE_SCALE,
            match_update: true,
        }
    }
}

/// [`tune_liu_type_with`] under default options.
pub fn tune_liu_type(data: &Dataset, part: &PartitionState, ridge: &Coefficients) -> Result<TuningParams> {
    tune_liu_type_with(data, part, ridge, &TuningOptions::default())
}

/// Liu-type tuning from a ridge fit: `λ` plug-ins from the ridge estimate
/// and `d` minimizing the plug-in MSE, with weights and means evaluated at
/// the ridge estimate. Expert `j` uses the rows `part` assigns to it; the
/// gating uses all rows. The reference class keeps `d* = 0`.
pub fn tune_liu_type_with(
    data: &Dataset,
    part: &PartitionState,
    ridge: &Coefficients,
    opts: &TuningOptions,
) -> Result<TuningParams> {
    let mut tuning = estimate_ridge_lambdas(ridge);
    let j_count = ridge.components();
    if part.components() != j_count || part.assignment().len() != data.n() {
        return Err(FmpreError::DimensionMismatch("partition does not match the fit".into()));
    }
    let range = |lambda: f64| (-opts.d_range_scale * lambda, opts.d_range_scale * lambda);
    let to_update = |d: f64, lambda: f64| if opts.match_update { d + lambda } else { d };
    for j in 0..j_count {
        let rows = part.members(j);
        if rows.is_empty() {
            return Err(FmpreError::TuningFailed(format!("component {j} has no rows for the MSE plug-in")));
        }
        let x = data.x().select_rows(&rows);
        let eta = &x * &ridge.beta()[j];
        let mu = eta.map(f64::exp);
        let mean = match opts.mean_term {
            MseMeanTerm::MeanFunction => &mu,
            MseMeanTerm::LinearPredictor => &eta,
        };
        let lambda = tuning.lambda_beta[j];
        let mse = LtMse::new(&x, &mu, lambda, &ridge.beta()[j], mean)?;
        tuning.d_beta[j] = to_update(optimize_bias_correction(|d| mse.eval(d), range(lambda))?.d_opt, lambda);
    }
    let probs = gating_probabilities(data.omega(), ridge.alpha())?;
    for j in 0..j_count {
        if j == ridge.reference() {
            continue;
        }
        let pi = probs.column(j).into_owned();
        let wg = pi.map(|p| (p * (1.0 - p)).clamp(WEIGHT_FLOOR, 1.0 - WEIGHT_FLOOR));
        let score = data.omega() * &ridge.alpha()[j];
        let mean = match opts.mean_term {
            MseMeanTerm::MeanFunction => &pi,
            MseMeanTerm::LinearPredictor => &score,
        };
        let lambda = tuning.lambda_alpha[j];
        let mse = LtMse::new(data.omega(), &wg, lambda, &ridge.alpha()[j], mean)?;
        tuning.d_alpha[j] = to_update(optimize_bias_correction(|d| mse.eval(d), range(lambda))?.d_opt, lambda);
    }
    Ok(tuning)
}
