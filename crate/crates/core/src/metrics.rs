//! Label alignment, estimation error, classification accuracy and
//! replicate summaries.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{FmpreError, Result};
use crate::model::{Coefficients, Dataset};
use crate::sem::e_step;

/// Largest number of components for exhaustive alignment.
pub const MAX_ALIGN_COMPONENTS: usize = 8;

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn rec(n: usize, current: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if current.len() == n {
            out.push(current.clone());
            return;
        }
        for k in 0..n {
            if !used[k] {
                used[k] = true;
                current.push(k);
                rec(n, current, used, out);
                current.pop();
                used[k] = false;
            }
        }
    }
    rec(n, &mut current, &mut used, &mut out);
    out
}

/// Permutation `σ` minimizing `Σ_j ‖β̂_σ(j) − β_j‖²`; ties go to the
/// lexicographically smallest `σ`. `estimate.permuted(&σ, ..)` puts the
/// estimate in the truth's labelling.
pub fn align_components(estimate: &Coefficients, truth: &Coefficients) -> Result<Vec<usize>> {
    let j_count = truth.components();
    if estimate.components() != j_count || estimate.p() != truth.p() {
        return Err(FmpreError::DimensionMismatch(
            "cannot align coefficient sets of different shapes".into(),
        ));
    }
    if j_count > MAX_ALIGN_COMPONENTS {
        return Err(FmpreError::InvalidInput(format!(
            "exhaustive alignment supports at most {MAX_ALIGN_COMPONENTS} components"
        )));
    }
    let mut cost = vec![vec![0.0; j_count]; j_count];
    for (a, row) in cost.iter_mut().enumerate() {
        for (b, c) in row.iter_mut().enumerate() {
            *c = (&estimate.beta()[a] - &truth.beta()[b]).norm_squared();
        }
    }
    let mut best = (f64::INFINITY, (0..j_count).collect::<Vec<_>>());
    for perm in permutations(j_count) {
        let total: f64 = perm.iter().enumerate().map(|(j, &k)| cost[k][j]).sum();
        if total < best.0 {
            best = (total, perm);
        }
    }
    Ok(best.1)
}

/// Estimate relabelled to match `truth`, with the truth's reference class.
pub fn align_to(estimate: &Coefficients, truth: &Coefficients) -> Result<Coefficients> {
    let perm = align_components(estimate, truth)?;
    estimate.permuted(&perm, truth.reference())
}

/// Which coefficient block an error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Beta,
    Alpha,
}

impl Block {
    pub fn label(self) -> &'static str {
        match self {
            Block::Beta => "beta",
            Block::Alpha => "alpha",
        }
    }
}

/// `(Σ_j ‖θ̂_j − θ_j‖² / n)^{1/2}` for already aligned estimates, where `n`
/// is the training sample size.
pub fn sqrt_mse(estimate: &Coefficients, truth: &Coefficients, block: Block, n: usize) -> Result<f64> {
    if estimate.components() != truth.components()
        || estimate.p() != truth.p()
        || estimate.q() != truth.q()
    {
        return Err(FmpreError::DimensionMismatch(
            "estimate and truth have different shapes".into(),
        ));
    }
    if n == 0 {
        return Err(FmpreError::InvalidInput("sample size must be positive".into()));
    }
    let (est, tru) = match block {
        Block::Beta => (estimate.beta(), truth.beta()),
        Block::Alpha => (estimate.alpha(), truth.alpha()),
    };
    let sum: f64 = est.iter().zip(tru).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok((sum / n as f64).sqrt())
}

/// Share of rows whose most probable component under `estimate` equals
/// the true label. `estimate` must already be aligned to the truth.
pub fn classification_accuracy(estimate: &Coefficients, data: &Dataset, labels: &[usize]) -> Result<f64> {
    if labels.len() != data.n() {
        return Err(FmpreError::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            data.n()
        )));
    }
    let predicted = e_step(data, estimate)?.map_assignment();
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Type-7 sample quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and 5th/95th percentiles of a metric over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub method: String,
    pub parameter_block: String,
    #[serde(rename = "M")]
    pub median: f64,
    #[serde(rename = "L")]
    pub lower: f64,
    #[serde(rename = "U")]
    pub upper: f64,
    pub n_replicates: usize,
    pub n_failed: usize,
}

/// Summarizes the finite entries of `values`; non-finite entries are added
/// to `n_failed`.
pub fn summarize_replicates(
    method: &str,
    parameter_block: &str,
    values: &[f64],
    n_failed: usize,
) -> Result<ReplicationSummary> {
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(FmpreError::SummaryUndefined(format!("{method}/{parameter_block}")));
    }
    finite.sort_by(f64::total_cmp);
    Ok(ReplicationSummary {
        method: method.to_string(),
        parameter_block: parameter_block.to_string(),
        median: quantile_sorted(&finite, 0.5),
        lower: quantile_sorted(&finite, 0.05),
        upper: quantile_sorted(&finite, 0.95),
        n_replicates: finite.len(),
        n_failed: n_failed + values.len() - finite.len(),
    })
}

/// Writes summaries as CSV with a header row.
pub fn write_summaries_csv<W: Write>(writer: W, summaries: &[ReplicationSummary]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    for s in summaries {
        csv.serialize(s)?;
    }
    csv.flush()?;
    Ok(())
}
