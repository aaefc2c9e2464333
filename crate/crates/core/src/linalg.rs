//! Small dense linear-algebra helpers shared by the IRWLS solvers.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{FmpreError, Result};

/// Systems whose condition estimate exceeds this are rejected when no
/// penalty is present.
pub const CONDITION_LIMIT: f64 = 1e12;

/// `X' diag(w) X`.
pub fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let p = x.ncols();
    let mut gram = DMatrix::zeros(p, p);
    for (i, row) in x.row_iter().enumerate() {
        let wi = w[i];
        for a in 0..p {
            let xa = row[a] * wi;
            for b in a..p {
                gram[(a, b)] += xa * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    gram
}

/// `X' diag(w) z`.
pub fn weighted_cross(x: &DMatrix<f64>, w: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
    let wz = w.component_mul(z);
    x.tr_mul(&wz)
}

/// Ratio of extreme eigenvalue magnitudes of a symmetric matrix; infinite
/// when the matrix is not positive definite.
pub fn condition_estimate(sym: &DMatrix<f64>) -> f64 {
    if sym.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let eig = SymmetricEigen::new(sym.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 || max <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `(gram + diag(penalty)) b = rhs` through a Cholesky factorization.
///
/// When any penalty entry is zero the condition of the system is checked
/// first and systems above [`CONDITION_LIMIT`] are rejected.
pub fn solve_penalized(
    gram: &DMatrix<f64>,
    penalty: &DVector<f64>,
    rhs: &DVector<f64>,
    context: &str,
) -> Result<DVector<f64>> {
    let mut system = gram.clone();
    for k in 0..system.nrows() {
        system[(k, k)] += penalty[k];
    }
    if system.iter().any(|v| !v.is_finite()) || rhs.iter().any(|v| !v.is_finite()) {
        return Err(FmpreError::NumericalFailure(format!(
            "{context}: non-finite normal equations"
        )));
    }
    if penalty.iter().any(|&l| l <= 0.0) {
        let condition = condition_estimate(&system);
        if condition > CONDITION_LIMIT {
            return Err(FmpreError::SingularSystem {
                context: context.to_string(),
                condition,
            });
        }
    }
    let chol = Cholesky::new(system).ok_or_else(|| FmpreError::SingularSystem {
        context: context.to_string(),
        condition: f64::INFINITY,
    })?;
    let solution = chol.solve(rhs);
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(FmpreError::NumericalFailure(format!(
            "{context}: non-finite solution"
        )));
    }
    Ok(solution)
}

/// Numerically stable `log(sum(exp(values)))`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
