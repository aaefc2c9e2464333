//! Simulation designs with collinear covariates and concomitants.
//!
//! Covariate `k` of a row is `m(ℓ_k) u_k + ℓ_k u_s`, where the `u` are
//! independent standard normals, `u_s` is a factor shared by all covariates
//! of the row and `ℓ_k` is `φ` or `ρ`. The multiplier `m(ℓ)` is `1 − ℓ²` in
//! the linear form and `√(1 − ℓ²)` in the square-root form; the latter gives
//! `cor = ℓ²` exactly. The regressors and the concomitants use independent
//! shared factors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FmpreError, Result};
use crate::gating::log_gating_row;
use crate::model::{Coefficients, Dataset};

/// Rows whose linear predictor exceeds this are redrawn.
pub const MAX_LINEAR_PREDICTOR: f64 = 30.0;

const MAX_ROW_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollinearityForm {
    /// `(1 − ℓ²) u_k + ℓ u_s`.
    #[default]
    Linear,
    /// `√(1 − ℓ²) u_k + ℓ u_s`.
    SqrtConvention,
}

impl CollinearityForm {
    fn multiplier(self, loading: f64) -> f64 {
        match self {
            CollinearityForm::Linear => 1.0 - loading * loading,
            CollinearityForm::SqrtConvention => (1.0 - loading * loading).sqrt(),
        }
    }
}

/// Which loading each non-intercept covariate gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLayout {
    /// First half of the covariates load `φ`, the rest `ρ`.
    #[default]
    PhiRhoPairs,
    /// Every covariate loads `ρ`.
    SharedRho,
}

/// A complete simulation design; serializes to TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationDesign {
    /// Training sample size.
    pub n: usize,
    /// Validation sample size.
    #[serde(default = "default_validation_n")]
    pub validation_n: usize,
    #[serde(default)]
    pub phi: f64,
    pub rho: f64,
    pub beta_true: Vec<Vec<f64>>,
    /// One row per expert; the reference row must be zero.
    pub alpha_true: Vec<Vec<f64>>,
    /// 0-based reference expert.
    pub reference_class: usize,
    #[serde(default)]
    pub collinearity_form: CollinearityForm,
    #[serde(default)]
    pub layout: CovariateLayout,
}

fn default_validation_n() -> usize {
    100
}

/// Named designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Study1,
    Study2,
}

impl std::str::FromStr for Preset {
    type Err = FmpreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "study1" => Ok(Preset::Study1),
            "study2" => Ok(Preset::Study2),
            other => Err(FmpreError::InvalidInput(format!("unknown preset {other}"))),
        }
    }
}

/// Correlation pairs `(φ, ρ)` of the two-expert study.
pub const STUDY1_CORRELATIONS: [(f64, f64); 4] = [(0.85, 0.90), (0.85, 0.95), (0.90, 0.90), (0.90, 0.95)];
pub const STUDY1_SAMPLE_SIZES: [usize; 2] = [100, 200];
pub const STUDY2_CORRELATIONS: [f64; 2] = [0.9, 0.95];
pub const STUDY2_SAMPLE_SIZE: usize = 300;

impl SimulationDesign {
    /// Two experts, four collinear covariates, second class as reference.
    pub fn study1() -> Self {
        Self {
            n: 100,
            validation_n: 100,
            phi: 0.90,
            rho: 0.85,
            beta_true: vec![vec![1.0, 1.0, 2.0, 3.0, 0.5], vec![-1.0, -1.0, -2.0, -0.5, -2.0]],
            alpha_true: vec![vec![0.5, -1.0, -1.0, 0.3, -3.0], vec![0.0; 5]],
            reference_class: 1,
            collinearity_form: CollinearityForm::Linear,
            layout: CovariateLayout::PhiRhoPairs,
        }
    }

    /// Three experts, two collinear covariates, third class as reference.
    pub fn study2() -> Self {
        Self {
            n: STUDY2_SAMPLE_SIZE,
            validation_n: 100,
            phi: 0.0,
            rho: 0.9,
            beta_true: vec![vec![0.85, -1.0, 2.0], vec![1.0, 0.5, 1.0], vec![-2.0, 2.0, -2.0]],
            alpha_true: vec![vec![0.5, -1.0, -1.0], vec![0.1, 1.0, 0.05], vec![0.0; 3]],
            reference_class: 2,
            collinearity_form: CollinearityForm::Linear,
            layout: CovariateLayout::SharedRho,
        }
    }

    pub fn preset(which: Preset) -> Self {
        match which {
            Preset::Study1 => Self::study1(),
            Preset::Study2 => Self::study2(),
        }
    }

    pub fn components(&self) -> usize {
        self.beta_true.len()
    }

    pub fn p(&self) -> usize {
        self.beta_true.first().map_or(0, Vec::len)
    }

    pub fn q(&self) -> usize {
        self.alpha_true.first().map_or(0, Vec::len)
    }

    /// True coefficients; also validates their shapes.
    pub fn truth(&self) -> Result<Coefficients> {
        Coefficients::from_rows(&self.beta_true, &self.alpha_true, self.reference_class)
    }

    pub fn validate(&self) -> Result<()> {
        self.truth()?;
        if self.n == 0 {
            return Err(FmpreError::InvalidInput("n must be positive".into()));
        }
        for (name, v) in [("phi", self.phi), ("rho", self.rho)] {
            if !(0.0..1.0).contains(&v) {
                return Err(FmpreError::InvalidInput(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let design: Self = toml::from_str(text).map_err(|e| FmpreError::InvalidInput(e.to_string()))?;
        design.validate()?;
        Ok(design)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FmpreError::InvalidInput(e.to_string()))
    }

    fn loadings(&self, covariates: usize) -> Vec<f64> {
        (0..covariates)
            .map(|k| match self.layout {
                CovariateLayout::SharedRho => self.rho,
                CovariateLayout::PhiRhoPairs if k < covariates / 2 => self.phi,
                CovariateLayout::PhiRhoPairs => self.rho,
            })
            .collect()
    }

    fn draw_block(&self, width: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let loadings = self.loadings(width - 1);
        let raw: Vec<f64> = (0..width - 1).map(|_| rng.sample(StandardNormal)).collect();
        let shared: f64 = rng.sample(StandardNormal);
        let mut row = DVector::from_element(width, 1.0);
        for (k, &l) in loadings.iter().enumerate() {
            row[k + 1] = self.collinearity_form.multiplier(l) * raw[k] + l * shared;
        }
        row
    }

    /// One regressor row and one concomitant row, each with a leading 1.
    pub fn draw_covariate_row(&self, rng: &mut ChaCha8Rng) -> (DVector<f64>, DVector<f64>) {
        let x = self.draw_block(self.p(), rng);
        let omega = self.draw_block(self.q(), rng);
        (x, omega)
    }
}

/// `n` rows of regressors and concomitants.
pub fn generate_covariates(design: &SimulationDesign, n: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut x = DMatrix::zeros(n, design.p());
    let mut omega = DMatrix::zeros(n, design.q());
    for i in 0..n {
        let (xr, wr) = design.draw_covariate_row(rng);
        x.set_row(i, &xr.transpose());
        omega.set_row(i, &wr.transpose());
    }
    (x, omega)
}

/// Draws `z ~ π(ω)` and `y ~ Poisson(exp(x'β_z))`; returns `None` when
/// the linear predictor is above [`MAX_LINEAR_PREDICTOR`].
fn draw_response(
    truth: &Coefficients,
    x: &DVector<f64>,
    omega: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(u64, usize)>> {
    let log_pi = log_gating_row(omega, truth.alpha());
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut z = log_pi.len() - 1;
    for (j, lp) in log_pi.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            z = j;
            break;
        }
    }
    let eta = x.dot(&truth.beta()[z]);
    if eta > MAX_LINEAR_PREDICTOR {
        return Ok(None);
    }
    let poisson = Poisson::new(eta.exp()).map_err(|e| FmpreError::NumericalFailure(e.to_string()))?;
    Ok(Some((poisson.sample(rng) as u64, z)))
}

/// A generated data set with its true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSample {
    pub data: Dataset,
    pub labels: Vec<usize>,
    /// Rows redrawn because their mean was too large.
    pub redrawn_rows: usize,
}

/// Responses and labels for given covariates. A row whose linear
/// predictor is too large gets fresh covariates from `design`.
pub fn generate_fmpre_sample(
    design: &SimulationDesign,
    mut x: DMatrix<f64>,
    mut omega: DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<SimulatedSample> {
    let truth = design.truth()?;
    let n = x.nrows();
    let mut y = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut redrawn_rows = 0;
    for i in 0..n {
        let mut attempts = 0;
        loop {
            let xr = x.row(i).transpose();
            let wr = omega.row(i).transpose();
            if let Some((yi, zi)) = draw_response(&truth, &xr, &wr, rng)? {
                y.push(yi);
                labels.push(zi);
                break;
            }
            attempts += 1;
            redrawn_rows += 1;
            if attempts > MAX_ROW_REDRAWS {
                return Err(FmpreError::NumericalFailure(format!(
                    "row {i}: linear predictor stays above {MAX_LINEAR_PREDICTOR}"
                )));
            }
            let (new_x, new_w) = design.draw_covariate_row(rng);
            x.set_row(i, &new_x.transpose());
            omega.set_row(i, &new_w.transpose());
        }
    }
    Ok(SimulatedSample {
        data: Dataset::new(y, x, omega)?,
        labels,
        redrawn_rows,
    })
}

/// Covariates, responses and labels for `n` rows.
pub fn simulate(design: &SimulationDesign, n: usize, rng: &mut ChaCha8Rng) -> Result<SimulatedSample> {
    design.validate()?;
    let (x, omega) = generate_covariates(design, n, rng);
    generate_fmpre_sample(design, x, omega, rng)
}
