//! Stochastic EM driver.
//!
//! One iteration computes the responsibilities `τ` (E-step), draws a hard
//! partition from them (S-step) and refits every expert and the gating
//! network on that partition with one penalized IRWLS step each (M-step).
//! Chains stop once the observed log-likelihood changes by less than `ε`
//! or after `max_iters` iterations; several independent chains are run and
//! the one whose selected estimate has the largest log-likelihood wins.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FmpreError, Result};
use crate::gating::coordinate_descent_alphas;
use crate::linalg::log_sum_exp;
use crate::metrics::{align_components, align_to};
use crate::model::{
    joint_log_density_row, observed_loglik, AssignmentRule, Coefficients, Dataset,
    EstimateSelection, FitResult, Method, PartitionState, SemOptions, TuningParams,
};
use crate::poisson::{
    build_workspace, glm_start, irwls_beta_step_with, ComponentWorkspace, PenaltyKind,
    SolverSettings,
};
use crate::rng::stream_rng;

/// Posterior membership probabilities, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    tau: DMatrix<f64>,
    loglik: f64,
}

impl Responsibilities {
    pub fn tau(&self) -> &DMatrix<f64> {
        &self.tau
    }

    /// Observed log-likelihood at the coefficients the responsibilities
    /// were computed from.
    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    /// Most probable component of each row; ties go to the lower index.
    pub fn map_assignment(&self) -> Vec<usize> {
        self.tau
            .row_iter()
            .map(|row| {
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// E-step: `τ_ij ∝ π_j(ω_i) Poi(y_i | μ_j(x_i))`, normalized in log space.
pub fn e_step(data: &Dataset, psi: &Coefficients) -> Result<Responsibilities> {
    if psi.p() != data.p() || psi.q() != data.q() {
        return Err(FmpreError::DimensionMismatch(
            "coefficients do not match the data".into(),
        ));
    }
    let mut tau = DMatrix::zeros(data.n(), psi.components());
    let mut loglik = 0.0;
    for i in 0..data.n() {
        let joint = joint_log_density_row(data, psi, i);
        let norm = log_sum_exp(&joint);
        if !norm.is_finite() {
            return Err(FmpreError::NumericalFailure(format!(
                "row {i} has non-finite mixture density"
            )));
        }
        loglik += norm;
        for (j, v) in joint.iter().enumerate() {
            tau[(i, j)] = (v - norm).exp();
        }
    }
    Ok(Responsibilities { tau, loglik })
}

/// S-step: one categorical draw per row from `τ` (or its argmax under
/// [`AssignmentRule::HardArgmax`]).
pub fn s_step(
    tau: &Responsibilities,
    rule: AssignmentRule,
    rng: &mut ChaCha8Rng,
) -> Result<PartitionState> {
    let j_count = tau.tau.ncols();
    let assignment = match rule {
        AssignmentRule::HardArgmax => tau.map_assignment(),
        AssignmentRule::Stochastic => tau
            .tau
            .row_iter()
            .map(|row| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut last = 0;
                for j in 0..j_count {
                    if row[j] > 0.0 {
                        last = j;
                    }
                    acc += row[j];
                    if u < acc {
                        return j;
                    }
                }
                last
            })
            .collect(),
    };
    let part = PartitionState::from_assignment(assignment, j_count)?;
    match part.first_empty() {
        Some(component) => Err(FmpreError::EmptyPartition { component }),
        None => Ok(part),
    }
}

/// Penalties applied to every expert and gating vector during a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyPlan {
    pub method: Method,
    pub beta: Vec<PenaltyKind>,
    pub alpha: Vec<PenaltyKind>,
    pub tuning: Option<TuningParams>,
}

impl PenaltyPlan {
    pub fn ml(components: usize) -> Self {
        Self {
            method: Method::Ml,
            beta: vec![PenaltyKind::Ml; components],
            alpha: vec![PenaltyKind::Ml; components],
            tuning: None,
        }
    }

    pub fn ridge(tuning: &TuningParams) -> Result<Self> {
        tuning.validate()?;
        Ok(Self {
            method: Method::Ridge,
            beta: tuning
                .lambda_beta
                .iter()
                .map(|&lambda| PenaltyKind::Ridge { lambda })
                .collect(),
            alpha: tuning
                .lambda_alpha
                .iter()
                .map(|&lambda| PenaltyKind::Ridge { lambda })
                .collect(),
            tuning: Some(tuning.clone()),
        })
    }

    /// Liu-type penalties shrinking towards the ridge estimate `anchor`.
    pub fn liu_type(tuning: &TuningParams, anchor: &Coefficients) -> Result<Self> {
        tuning.validate()?;
        if anchor.components() != tuning.lambda_beta.len() {
            return Err(FmpreError::DimensionMismatch(
                "anchor and tuning disagree on the number of components".into(),
            ));
        }
        let beta = (0..anchor.components())
            .map(|j| PenaltyKind::LiuType {
                lambda: tuning.lambda_beta[j],
                d: tuning.d_beta[j],
                anchor: anchor.beta()[j].clone(),
            })
            .collect();
        let alpha = (0..anchor.components())
            .map(|j| PenaltyKind::LiuType {
                lambda: tuning.lambda_alpha[j],
                d: tuning.d_alpha[j],
                anchor: anchor.alpha()[j].clone(),
            })
            .collect();
        Ok(Self {
            method: Method::LiuType,
            beta,
            alpha,
            tuning: Some(tuning.clone()),
        })
    }

    pub fn components(&self) -> usize {
        self.beta.len()
    }
}

/// M-step: one penalized IRWLS update per expert, then coordinate descent
/// over the gating vectors. The reference gating vector stays at zero.
pub fn m_step(
    data: &Dataset,
    part: &PartitionState,
    psi_t: &Coefficients,
    plan: &PenaltyPlan,
    settings: &SolverSettings,
    opts: &SemOptions,
) -> Result<Coefficients> {
    let j_count = psi_t.components();
    if plan.components() != j_count || part.components() != j_count {
        return Err(FmpreError::DimensionMismatch(
            "penalty plan, partition and coefficients disagree on J".into(),
        ));
    }
    let mut beta = Vec::with_capacity(j_count);
    for j in 0..j_count {
        let ws = build_workspace(data, part, j, &psi_t.beta()[j])?;
        beta.push(irwls_beta_step_with(&ws, &plan.beta[j], settings)?);
    }
    let (alpha, _) = coordinate_descent_alphas(
        data.omega(),
        part.assignment(),
        psi_t.alpha(),
        psi_t.reference(),
        &plan.alpha,
        settings,
        opts.inner_tol,
        opts.inner_max,
    )?;
    Coefficients::new(beta, alpha, psi_t.reference())
}

/// Starting point of a chain.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Initialization {
    /// Uniform random partition; each expert gets three ML IRWLS steps on
    /// its group and the gating starts at zero.
    #[default]
    RandomPartition,
    /// Groups of consecutive `y` order statistics.
    QuantileSplit,
    Given(Coefficients),
    /// Restart 0 starts at the given coefficients; later restarts draw a
    /// random partition and relabel their experts to match them.
    Anchored(Coefficients),
}

/// Number of experts, reference gating class and starting strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub components: usize,
    pub reference: usize,
    pub init: Initialization,
}

impl MixtureSpec {
    pub fn new(components: usize, reference: usize) -> Result<Self> {
        if components == 0 || reference >= components {
            return Err(FmpreError::InvalidInput(format!(
                "need J >= 1 and reference < J, got J={components}, reference={reference}"
            )));
        }
        Ok(Self {
            components,
            reference,
            init: Initialization::RandomPartition,
        })
    }

    pub fn with_init(mut self, init: Initialization) -> Self {
        self.init = init;
        self
    }
}

const INIT_IRWLS_STEPS: usize = 3;
const INIT_PARTITION_DRAWS: usize = 100;

fn initial_beta(data: &Dataset, part: &PartitionState, j: usize) -> DVector<f64> {
    let rows = part.members(j);
    let x = data.x().select_rows(&rows);
    let y: Vec<u64> = rows.iter().map(|&r| data.y()[r]).collect();
    let fallback = || {
        let mean = y.iter().sum::<u64>() as f64 / y.len() as f64;
        let mut b = DVector::zeros(data.p());
        b[0] = (mean + 0.5).ln();
        b
    };
    let Ok(mut beta) = glm_start(&x, &y) else {
        return fallback();
    };
    for _ in 0..INIT_IRWLS_STEPS {
        let step = ComponentWorkspace::new(x.clone(), &y, beta.clone())
            .and_then(|ws| irwls_beta_step_with(&ws, &PenaltyKind::Ml, &SolverSettings::default()));
        match step {
            Ok(next) => beta = next,
            Err(_) => return fallback(),
        }
    }
    beta
}

fn check_given(psi: &Coefficients, spec: &MixtureSpec) -> Result<()> {
    if psi.components() != spec.components || psi.reference() != spec.reference {
        return Err(FmpreError::InvalidInput(
            "initial coefficients do not match the mixture spec".into(),
        ));
    }
    Ok(())
}

/// Builds `Ψ⁽⁰⁾` of chain `restart` according to the spec's initialization
/// strategy.
pub fn initialize(data: &Dataset, spec: &MixtureSpec, restart: usize, rng: &mut ChaCha8Rng) -> Result<Coefficients> {
    if let Initialization::Anchored(anchor) = &spec.init {
        check_given(anchor, spec)?;
        if restart == 0 {
            return Ok(anchor.clone());
        }
        let fresh = spec.clone().with_init(Initialization::RandomPartition);
        let psi = initialize(data, &fresh, restart, rng)?;
        return align_to(&psi, anchor);
    }
    let j_count = spec.components;
    if data.n() < j_count {
        return Err(FmpreError::InvalidInput(format!(
            "{} observations cannot fill {j_count} components",
            data.n()
        )));
    }
    let part = match &spec.init {
        Initialization::Given(psi) => {
            check_given(psi, spec)?;
            return Ok(psi.clone());
        }
        Initialization::Anchored(_) => unreachable!("handled above"),
        Initialization::RandomPartition => {
            let mut found = None;
            for _ in 0..INIT_PARTITION_DRAWS {
                let assignment = (0..data.n()).map(|_| rng.random_range(0..j_count)).collect();
                let part = PartitionState::from_assignment(assignment, j_count)?;
                if part.first_empty().is_none() {
                    found = Some(part);
                    break;
                }
            }
            found.ok_or_else(|| {
                FmpreError::InvalidInput("could not draw a partition without empty groups".into())
            })?
        }
        Initialization::QuantileSplit => {
            let mut order: Vec<usize> = (0..data.n()).collect();
            order.sort_by_key(|&i| (data.y()[i], i));
            let mut assignment = vec![0; data.n()];
            for (rank, &i) in order.iter().enumerate() {
                assignment[i] = rank * j_count / data.n();
            }
            PartitionState::from_assignment(assignment, j_count)?
        }
    };
    let beta = (0..j_count).map(|j| initial_beta(data, &part, j)).collect();
    Coefficients::new(beta, vec![DVector::zeros(data.q()); j_count], spec.reference)
}

/// Snapshot handed to a chain observer after every iteration.
#[derive(Debug)]
pub struct IterationRecord<'a> {
    pub restart: usize,
    pub iteration: usize,
    pub responsibilities: &'a Responsibilities,
    pub partition: &'a PartitionState,
    pub psi: &'a Coefficients,
    pub loglik: f64,
}

/// Outcome of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    pub psi_hat: Coefficients,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub selected_iteration: usize,
}

/// Runs a single chain from `psi0`.
#[allow(clippy::too_many_arguments)]
pub fn run_chain(
    data: &Dataset,
    psi0: Coefficients,
    plan: &PenaltyPlan,
    opts: &SemOptions,
    settings: &SolverSettings,
    rng: &mut ChaCha8Rng,
    mut observer: impl FnMut(&IterationRecord<'_>),
    restart: usize,
) -> Result<ChainResult> {
    let mut psi = psi0;
    let mut prev = observed_loglik(data, &psi)?;
    let mut trace = Vec::new();
    let mut iterates = Vec::new();
    let mut converged = false;
    for t in 1..=opts.max_iters {
        let resp = e_step(data, &psi)?;
        let part = s_step(&resp, opts.assignment, rng)?;
        psi = m_step(data, &part, &psi, plan, settings, opts)?;
        let ll = observed_loglik(data, &psi)?;
        observer(&IterationRecord {
            restart,
            iteration: t,
            responsibilities: &resp,
            partition: &part,
            psi: &psi,
            loglik: ll,
        });
        trace.push(ll);
        iterates.push(psi.clone());
        if (ll - prev).abs() < opts.epsilon {
            converged = true;
            break;
        }
        prev = ll;
    }
    let (psi_hat, loglik, selected_iteration) = select_estimate(data, &trace, &iterates, opts)?;
    Ok(ChainResult {
        psi_hat,
        loglik,
        loglik_trace: trace,
        converged,
        selected_iteration,
    })
}

/// Picks the reported estimate from the iterates after burn-in, or from all
/// iterates when the chain stopped before the burn-in ended.
fn select_estimate(
    data: &Dataset,
    trace: &[f64],
    iterates: &[Coefficients],
    opts: &SemOptions,
) -> Result<(Coefficients, f64, usize)> {
    let start = if trace.len() > opts.burn_in { opts.burn_in } else { 0 };
    let mut best = start;
    for t in start..trace.len() {
        if trace[t] > trace[best] {
            best = t;
        }
    }
    match opts.estimate_selection {
        EstimateSelection::BestLoglik => Ok((iterates[best].clone(), trace[best], best + 1)),
        EstimateSelection::PostBurninMean => {
            let anchor = &iterates[best];
            let window = &iterates[start..];
            let mut beta = vec![DVector::zeros(anchor.p()); anchor.components()];
            let mut alpha = vec![DVector::zeros(anchor.q()); anchor.components()];
            for psi in window {
                let perm = align_components(psi, anchor)?;
                let aligned = psi.permuted(&perm, anchor.reference())?;
                for j in 0..anchor.components() {
                    beta[j] += &aligned.beta()[j];
                    alpha[j] += &aligned.alpha()[j];
                }
            }
            let count = window.len() as f64;
            let mean = Coefficients::new(
                beta.into_iter().map(|b| b / count).collect(),
                alpha.into_iter().map(|a| a / count).collect(),
                anchor.reference(),
            )?;
            let ll = observed_loglik(data, &mean)?;
            Ok((mean, ll, best + 1))
        }
    }
}

/// Runs `opts.n_restarts` chains with independent streams derived from
/// `opts.rng_seed` and returns the best one.
pub fn run_sem(
    data: &Dataset,
    spec: &MixtureSpec,
    opts: &SemOptions,
    plan: &PenaltyPlan,
    settings: &SolverSettings,
) -> Result<FitResult> {
    run_sem_observed(data, spec, opts, plan, settings, |_| {})
}

/// [`run_sem`] with a callback invoked after every iteration of every chain.
pub fn run_sem_observed(
    data: &Dataset,
    spec: &MixtureSpec,
    opts: &SemOptions,
    plan: &PenaltyPlan,
    settings: &SolverSettings,
    mut observer: impl FnMut(&IterationRecord<'_>),
) -> Result<FitResult> {
    opts.validate()?;
    if plan.components() != spec.components {
        return Err(FmpreError::DimensionMismatch(
            "penalty plan and mixture spec disagree on J".into(),
        ));
    }
    let mut best: Option<ChainResult> = None;
    let mut failures = Vec::new();
    for restart in 0..opts.n_restarts {
        let mut rng = stream_rng(opts.rng_seed, &[restart as u64]);
        let outcome = initialize(data, spec, restart, &mut rng).and_then(|psi0| {
            run_chain(data, psi0, plan, opts, settings, &mut rng, &mut observer, restart)
        });
        match outcome {
            Ok(chain) => {
                if best.as_ref().is_none_or(|b| chain.loglik > b.loglik) {
                    best = Some(chain);
                }
            }
            Err(err) => failures.push(format!("restart {restart}: {err}")),
        }
    }
    let Some(chain) = best else {
        return Err(FmpreError::FitFailed {
            attempts: opts.n_restarts,
            diagnostics: failures.join("; "),
        });
    };
    Ok(FitResult {
        method: plan.method,
        iterations_run: chain.loglik_trace.len(),
        psi_hat: chain.psi_hat,
        loglik_trace: chain.loglik_trace,
        converged: chain.converged,
        tuning: plan.tuning.clone(),
        selected_iteration: chain.selected_iteration,
        loglik: chain.loglik,
        restarts_failed: failures.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poisson::fit_poisson_glm;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Poisson};
    use statrs::distribution::{Discrete, Poisson as PoissonPmf};

    fn truth() -> Coefficients {
        Coefficients::from_rows(&[vec![0.5, 0.3], vec![2.5, -0.5]], &[vec![0.2, 1.0], vec![0.0, 0.0]], 1).unwrap()
    }

    fn two_component_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = truth();
        let x = DMatrix::from_fn(n, 2, |_, k| if k == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let omega = DMatrix::from_fn(n, 2, |_, k| if k == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let y = (0..n)
            .map(|i| {
                let p0 = 1.0 / (1.0 + (-(omega.row(i) * &psi.alpha()[0])[0]).exp());
                let j = usize::from(rng.random::<f64>() >= p0);
                let mu = (x.row(i) * &psi.beta()[j])[0].exp();
                Poisson::new(mu).unwrap().sample(&mut rng) as u64
            })
            .collect();
        Dataset::new(y, x, omega).unwrap()
    }

    fn quick_opts() -> SemOptions {
        SemOptions {
            max_iters: 60,
            burn_in: 10,
            n_restarts: 2,
            rng_seed: 11,
            ..SemOptions::default()
        }
    }

    #[test]
    fn e_step_matches_direct_bayes_rule() {
        let data = two_component_data(30, 1);
        let psi = truth();
        let resp = e_step(&data, &psi).unwrap();
        let mut loglik = 0.0;
        for i in 0..data.n() {
            let s = (data.omega().row(i) * &psi.alpha()[0])[0];
            let pi = [s.exp() / (1.0 + s.exp()), 1.0 / (1.0 + s.exp())];
            let joint: Vec<f64> = (0..2)
                .map(|j| {
                    let mu = (data.x().row(i) * &psi.beta()[j])[0].exp();
                    pi[j] * PoissonPmf::new(mu).unwrap().pmf(data.y()[i])
                })
                .collect();
            let total: f64 = joint.iter().sum();
            loglik += total.ln();
            for j in 0..2 {
                assert_relative_eq!(resp.tau()[(i, j)], joint[j] / total, max_relative = 1e-10);
            }
            assert_relative_eq!(resp.tau().row(i).sum(), 1.0, epsilon = 1e-12);
        }
        assert_relative_eq!(resp.loglik(), loglik, max_relative = 1e-10);
    }

    #[test]
    fn e_step_rejects_wrong_shapes() {
        let data = two_component_data(10, 1);
        let psi = Coefficients::zeros(2, 3, 2, 1).unwrap();
        assert!(matches!(e_step(&data, &psi), Err(FmpreError::DimensionMismatch(_))));
    }

    fn fixed_tau(n: usize, row: &[f64]) -> Responsibilities {
        Responsibilities {
            tau: DMatrix::from_fn(n, row.len(), |_, j| row[j]),
            loglik: 0.0,
        }
    }

    #[test]
    fn stochastic_draws_follow_tau() {
        let n = 4000;
        let resp = fixed_tau(n, &[0.3, 0.7]);
        let part = s_step(&resp, AssignmentRule::Stochastic, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let share = part.counts()[1] as f64 / n as f64;
        let sd = (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((share - 0.7).abs() < 4.0 * sd, "share {share}");
        let again = s_step(&resp, AssignmentRule::Stochastic, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(part, again);
    }

    #[test]
    fn hard_rule_is_the_map_partition() {
        let data = two_component_data(50, 2);
        let resp = e_step(&data, &truth()).unwrap();
        let part = s_step(&resp, AssignmentRule::HardArgmax, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(part.assignment(), resp.map_assignment().as_slice());
    }

    #[test]
    fn map_ties_go_to_lower_index() {
        assert_eq!(fixed_tau(2, &[0.5, 0.5]).map_assignment(), vec![0, 0]);
    }

    #[test]
    fn empty_component_is_reported() {
        let resp = fixed_tau(5, &[1.0, 0.0, 0.0]);
        let err = s_step(&resp, AssignmentRule::Stochastic, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, FmpreError::EmptyPartition { component: 1 }));
    }

    #[test]
    fn liu_type_with_zero_d_is_ridge_step() {
        let data = two_component_data(60, 4);
        let psi = truth();
        let part = PartitionState::from_assignment(e_step(&data, &psi).unwrap().map_assignment(), 2).unwrap();
        let tuning = TuningParams {
            lambda_beta: vec![0.4, 0.9],
            lambda_alpha: vec![0.3, 1.0],
            d_beta: vec![0.0; 2],
            d_alpha: vec![0.0; 2],
            capped_beta: vec![false; 2],
            capped_alpha: vec![false; 2],
        };
        let opts = SemOptions::default();
        let settings = SolverSettings::default();
        let ridge = m_step(&data, &part, &psi, &PenaltyPlan::ridge(&tuning).unwrap(), &settings, &opts).unwrap();
        let lt_plan = PenaltyPlan::liu_type(&tuning, &ridge).unwrap();
        let lt = m_step(&data, &part, &psi, &lt_plan, &settings, &opts).unwrap();
        assert_eq!(lt, ridge);
    }

    #[test]
    fn m_step_keeps_reference_at_zero() {
        let data = two_component_data(60, 5);
        let psi = truth();
        let part = PartitionState::from_assignment(e_step(&data, &psi).unwrap().map_assignment(), 2).unwrap();
        let next = m_step(&data, &part, &psi, &PenaltyPlan::ml(2), &SolverSettings::default(), &SemOptions::default())
            .unwrap();
        assert!(next.alpha()[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn huge_epsilon_stops_after_one_iteration() {
        let data = two_component_data(80, 6);
        let spec = MixtureSpec::new(2, 1).unwrap().with_init(Initialization::Given(truth()));
        let opts = SemOptions {
            epsilon: 1e9,
            n_restarts: 1,
            ..quick_opts()
        };
        let fit = run_sem(&data, &spec, &opts, &PenaltyPlan::ml(2), &SolverSettings::default()).unwrap();
        assert_eq!(fit.iterations_run, 1);
        assert!(fit.converged);
        assert_eq!(fit.selected_iteration, 1);
    }

    #[test]
    fn single_component_recovers_poisson_glm() {
        let data = two_component_data(80, 7);
        let spec = MixtureSpec::new(1, 0).unwrap();
        let opts = SemOptions {
            epsilon: 1e-12,
            max_iters: 100,
            burn_in: 0,
            n_restarts: 1,
            ..SemOptions::default()
        };
        let fit = run_sem(&data, &spec, &opts, &PenaltyPlan::ml(1), &SolverSettings::default()).unwrap();
        let glm =
            fit_poisson_glm(data.x(), data.y(), &PenaltyKind::Ml, &SolverSettings::default(), 100, 1e-12).unwrap();
        for k in 0..2 {
            assert_relative_eq!(fit.psi_hat.beta()[0][k], glm[k], max_relative = 1e-8);
        }
    }

    #[test]
    fn same_seed_same_fit() {
        let data = two_component_data(100, 8);
        let spec = MixtureSpec::new(2, 1).unwrap();
        let run = || run_sem(&data, &spec, &quick_opts(), &PenaltyPlan::ml(2), &SolverSettings::default()).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn responsibilities_stay_normalized_along_the_chain() {
        let data = two_component_data(100, 9);
        let spec = MixtureSpec::new(2, 1).unwrap();
        let mut worst = 0.0f64;
        run_sem_observed(&data, &spec, &quick_opts(), &PenaltyPlan::ml(2), &SolverSettings::default(), |rec| {
            for row in rec.responsibilities.tau().row_iter() {
                worst = worst.max((row.sum() - 1.0).abs());
            }
        })
        .unwrap();
        assert!(worst < 1e-12);
    }

    #[test]
    fn hard_chain_commutes_with_relabeling() {
        let data = two_component_data(100, 10);
        let start = Coefficients::from_rows(&[vec![0.3, 0.0], vec![2.0, 0.0]], &[vec![0.1, 0.5], vec![0.0, 0.0]], 1)
            .unwrap();
        let swapped = start.permuted(&[1, 0], 0).unwrap();
        let opts = SemOptions {
            assignment: AssignmentRule::HardArgmax,
            n_restarts: 1,
            ..quick_opts()
        };
        let fit = |psi: &Coefficients| {
            let spec = MixtureSpec::new(2, psi.reference()).unwrap().with_init(Initialization::Given(psi.clone()));
            run_sem(&data, &spec, &opts, &PenaltyPlan::ml(2), &SolverSettings::default()).unwrap()
        };
        let a = fit(&start);
        let b = fit(&swapped);
        let back = b.psi_hat.permuted(&[1, 0], 1).unwrap();
        assert_eq!(a.iterations_run, b.iterations_run);
        for j in 0..2 {
            assert_relative_eq!(a.psi_hat.beta()[j], back.beta()[j], epsilon = 1e-9);
            assert_relative_eq!(a.psi_hat.alpha()[j], back.alpha()[j], epsilon = 1e-9);
        }
    }

    #[test]
    fn hard_chain_ignores_the_seed() {
        let data = two_component_data(100, 12);
        let spec = MixtureSpec::new(2, 1).unwrap().with_init(Initialization::Given(truth()));
        let fit = |seed| {
            let opts = SemOptions {
                assignment: AssignmentRule::HardArgmax,
                n_restarts: 1,
                rng_seed: seed,
                ..quick_opts()
            };
            run_sem(&data, &spec, &opts, &PenaltyPlan::ml(2), &SolverSettings::default()).unwrap().psi_hat
        };
        assert_eq!(fit(1), fit(2));
    }

    #[test]
    fn post_burnin_mean_reports_its_own_loglik() {
        let data = two_component_data(100, 13);
        let spec = MixtureSpec::new(2, 1).unwrap().with_init(Initialization::Given(truth()));
        let opts = SemOptions {
            estimate_selection: EstimateSelection::PostBurninMean,
            epsilon: 1e-12,
            ..quick_opts()
        };
        let fit = run_sem(&data, &spec, &opts, &PenaltyPlan::ml(2), &SolverSettings::default()).unwrap();
        assert_relative_eq!(fit.loglik, observed_loglik(&data, &fit.psi_hat).unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn best_loglik_is_the_maximum_after_burn_in() {
        let data = two_component_data(100, 14);
        let spec = MixtureSpec::new(2, 1).unwrap().with_init(Initialization::Given(truth()));
        let opts = SemOptions {
            epsilon: 1e-12,
            n_restarts: 1,
            ..quick_opts()
        };
        let fit = run_sem(&data, &spec, &opts, &PenaltyPlan::ml(2), &SolverSettings::default()).unwrap();
        let tail = &fit.loglik_trace[opts.burn_in..];
        assert_eq!(fit.loglik, tail.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        assert!(fit.selected_iteration > opts.burn_in);
    }

    #[test]
    fn anchored_restarts_share_the_anchor_labels() {
        let data = two_component_data(100, 15);
        let anchor = truth().permuted(&[1, 0], 1).unwrap();
        let spec = MixtureSpec::new(2, 1).unwrap().with_init(Initialization::Anchored(anchor.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(initialize(&data, &spec, 0, &mut rng).unwrap(), anchor);
        for restart in 1..4 {
            let psi = initialize(&data, &spec, restart, &mut rng).unwrap();
            assert_eq!(align_components(&psi, &anchor).unwrap(), vec![0, 1]);
        }
    }

    #[test]
    fn random_start_has_zero_gating() {
        let data = two_component_data(50, 16);
        let spec = MixtureSpec::new(2, 1).unwrap();
        let psi = initialize(&data, &spec, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(psi.alpha().iter().all(|a| a.iter().all(|&v| v == 0.0)));
        assert!(psi.beta().iter().all(|b| b.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn initialization_errors() {
        let data = two_component_data(2, 17);
        let spec = MixtureSpec::new(3, 0).unwrap();
        assert!(initialize(&data, &spec, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let wrong = MixtureSpec::new(2, 0).unwrap().with_init(Initialization::Given(truth()));
        assert!(matches!(
            initialize(&data, &wrong, 0, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(FmpreError::InvalidInput(_))
        ));
        assert!(MixtureSpec::new(2, 2).is_err());
    }

    #[test]
    fn all_restarts_failing_is_fit_failed() {
        // Two identical rows cannot support two non-empty ML experts with p = 2.
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 1.0, 0.5]);
        let data = Dataset::new(vec![1, 3], x.clone(), x).unwrap();
        let spec = MixtureSpec::new(2, 1).unwrap();
        let err = run_sem(&data, &spec, &quick_opts(), &PenaltyPlan::ml(2), &SolverSettings::default()).unwrap_err();
        assert!(matches!(err, FmpreError::FitFailed { attempts: 2, .. }));
    }
}
