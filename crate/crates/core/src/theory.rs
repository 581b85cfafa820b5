//! Mechanical checks of the Munchausen identities and bounds on exactly
//! solvable MDPs: M-VI / MD-VI equivalence, the CVI → AL limit, action-gap
//! growth, and the sup-norm and component-wise error-propagation bounds.
//!
//! Resolvents `(I − γP_π)^{-1}` are always applied through dense LU
//! solves ([`crate::linalg::Resolvent`]).

use std::io::Write;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::linalg::{apply_kernel, Resolvent};
use crate::mdp::{
    argmax_lowest, greedy_policy, solve_q_pi, solve_q_pi_regularized, solve_q_star,
    solve_soft_q_star, FiniteMdp, QFunction, StochasticPolicy, DEFAULT_TOL,
};
use crate::regularized::{softmax_policy, TemperatureParams};
use crate::schemes::{
    al_step, cvi_step, run_scheme, ErrorModel, IterationTrace, RunOptions, Scheme, SchemeState,
};

/// Pass threshold of the equivalence checks.
pub const EQUIVALENCE_TOL: f64 = 1e-8;
/// Component-wise slack allowed when comparing bound sides.
pub const BOUND_SLACK: f64 = 1e-9;
/// Reference gaps below this are excluded from ratio checks.
pub const GAP_FLOOR: f64 = 1e-4;

/// Outcome of running M-VI and MD-VI side by side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub max_policy_deviation: f64,
    pub max_q_prime_deviation: f64,
    pub passed: bool,
}

/// Runs M-VI(α, τ) and MD-VI(ατ, (1−α)τ) with the same errors and matched
/// initialization `q'_0 = q_0 − ατ ln π_0` (uniform `π_0`, zero `q_0`).
pub fn check_equivalence(
    mdp: &FiniteMdp,
    alpha: f64,
    tau: f64,
    iterations: usize,
    error_model: &ErrorModel,
) -> Result<EquivalenceReport> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let q0 = QFunction::zeros(ns, na);
    let pi0 = StochasticPolicy::uniform(ns, na);
    let q_prime0 = q0.map(|q| q - alpha * tau * (1.0 / na as f64).ln());
    check_equivalence_from(mdp, alpha, tau, iterations, error_model, q0, q_prime0, pi0)
}

/// Same as [`check_equivalence`] with explicit initial values for both
/// schemes. Passing `q_prime0 ≠ q0 − ατ ln π0` breaks the equivalence.
#[allow(clippy::too_many_arguments)]
pub fn check_equivalence_from(
    mdp: &FiniteMdp,
    alpha: f64,
    tau: f64,
    iterations: usize,
    error_model: &ErrorModel,
    q0: QFunction,
    q_prime0: QFunction,
    pi0: StochasticPolicy,
) -> Result<EquivalenceReport> {
    if !(0.0..=1.0).contains(&alpha) || !(tau > 0.0) {
        return invalid("equivalence check needs alpha in [0,1] and tau > 0");
    }
    let params = TemperatureParams::new(tau, alpha, -1.0)?;
    let mvi = run_scheme(
        mdp,
        Scheme::Mvi,
        &params,
        error_model,
        &RunOptions::new(iterations).with_q0(q0).with_pi0(pi0.clone()),
    )?;
    let mdvi = run_scheme(
        mdp,
        Scheme::Mdvi,
        &params,
        error_model,
        &RunOptions::new(iterations).with_q0(q_prime0).with_pi0(pi0),
    )?;
    let mut max_policy_deviation: f64 = 0.0;
    let mut max_q_prime_deviation: f64 = 0.0;
    if mvi.len() != mdvi.len() {
        return Ok(EquivalenceReport {
            max_policy_deviation: f64::INFINITY,
            max_q_prime_deviation: f64::INFINITY,
            passed: false,
        });
    }
    for (a, b) in mvi.entries.iter().zip(&mdvi.entries) {
        max_policy_deviation = max_policy_deviation.max(a.policy.sup_distance(&b.policy));
        max_q_prime_deviation = max_q_prime_deviation.max(a.q_prime.sup_distance(&b.q_prime));
    }
    Ok(EquivalenceReport {
        max_policy_deviation,
        max_q_prime_deviation,
        passed: max_policy_deviation <= EQUIVALENCE_TOL && max_q_prime_deviation <= EQUIVALENCE_TOL,
    })
}

/// Max over `k` of `‖q_k^{M-VI} − q_k^{CVI}‖∞` under shared errors.
pub fn cvi_form_deviation(
    mdp: &FiniteMdp,
    params: &TemperatureParams,
    iterations: usize,
    error_model: &ErrorModel,
) -> Result<f64> {
    let opts = RunOptions::new(iterations);
    let mvi = run_scheme(mdp, Scheme::Mvi, params, error_model, &opts)?;
    let cvi = run_scheme(mdp, Scheme::Cvi, params, error_model, &opts)?;
    Ok(mvi
        .entries
        .iter()
        .zip(&cvi.entries)
        .map(|(a, b)| a.q.sup_distance(&b.q).max(a.policy.sup_distance(&b.policy)))
        .fold(0.0, f64::max))
}

/// Per-temperature discrepancy between CVI(τ) and AL steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlLimitReport {
    pub taus: Vec<f64>,
    /// Max over the trajectory of `‖cvi_step(q_k; τ) − al_step(q_k)‖∞`.
    pub discrepancies: Vec<f64>,
    /// Smallest best-vs-second-best margin met along the trajectory.
    pub min_greedy_margin: f64,
    /// Each discrepancy is at most the previous one scaled by the
    /// temperature ratio, up to a floating-point floor.
    pub at_least_linear: bool,
}

/// Follows the AL trajectory from `q0` for `steps` steps and, at each
/// iterate, compares one CVI(τ) step with one AL step for every `τ`.
pub fn al_limit(
    mdp: &FiniteMdp,
    alpha: f64,
    taus: &[f64],
    q0: QFunction,
    steps: usize,
) -> Result<AlLimitReport> {
    if taus.is_empty() {
        return invalid("at least one temperature is needed");
    }
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let zero = QFunction::zeros(ns, na);
    let mut state = SchemeState::new(q0, StochasticPolicy::uniform(ns, na))?;
    let mut discrepancies = vec![0.0_f64; taus.len()];
    let mut min_margin = f64::INFINITY;
    let mut scale: f64 = 0.0;
    for _ in 0..steps {
        for s in 0..ns {
            let row = state.q.row(s);
            let best = argmax_lowest(row);
            let second = row
                .iter()
                .enumerate()
                .filter(|&(a, _)| a != best)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            min_margin = min_margin.min(row[best] - second);
        }
        scale = scale.max(state.q.sup_norm());
        let al = al_step(mdp, &state, alpha, &zero)?;
        for (d, &tau) in discrepancies.iter_mut().zip(taus) {
            let params = TemperatureParams::new(tau, alpha, -1.0)?;
            let cvi = cvi_step(mdp, &state, &params, &zero)?;
            *d = d.max(cvi.q.sup_distance(&al.q));
        }
        state = al;
    }
    let floor = 64.0 * f64::EPSILON * (1.0 + scale);
    let at_least_linear = discrepancies.windows(2).zip(taus.windows(2)).all(|(d, t)| {
        d[1] <= d[0] * (t[1] / t[0]) + floor
    });
    Ok(AlLimitReport {
        taus: taus.to_vec(),
        discrepancies,
        min_greedy_margin: min_margin,
        at_least_linear,
    })
}

/// Action-gap statistics of an error-free M-VI(α < 1) run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapProfile {
    /// `Δ_k(s,·) = max_a q_k(s,a) − q_k(s,·)` for every recorded `k`.
    #[serde(skip)]
    pub gaps: Vec<QFunction>,
    /// Gap of `q*^{(1−α)τ}`.
    #[serde(skip)]
    pub reference_gap: QFunction,
    /// `(1+α)/(1−α)`, the multiplier stated for the limit.
    pub predicted_multiplier: f64,
    /// `1/(1−α)`, the multiplier obtained from the closed-form limit
    /// `q_∞ = q*^{(1−α)τ} + ατ ln π*^{(1−α)τ}`.
    pub derived_multiplier: f64,
    /// Range of `Δ_K/Δ*` over pairs with `Δ* > GAP_FLOOR`.
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// `max |Δ_K/Δ* − m| / m` for `m = predicted_multiplier`.
    pub predicted_relative_deviation: f64,
    /// Same with `m = derived_multiplier`.
    pub derived_relative_deviation: f64,
    /// Number of `(s, a)` pairs entering the ratio.
    pub pairs_checked: usize,
}

/// Growth of the gaps of an M-VI(1, τ) run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    /// Mean over states of the best-vs-second-best gap at each `k`.
    pub mean_gap: Vec<f64>,
    /// The mean gap never decreases over the recorded range.
    pub monotone: bool,
    pub diverged_flag: bool,
}

impl DivergenceReport {
    pub fn growth(&self, early: usize, late: usize) -> Option<f64> {
        Some(self.mean_gap.get(late)? / self.mean_gap.get(early)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum GapOutcome {
    Converging(GapProfile),
    Diverging(DivergenceReport),
}

fn second_best_gap(q: &QFunction, s: usize) -> f64 {
    let row = q.row(s);
    let best = argmax_lowest(row);
    row.iter()
        .enumerate()
        .filter(|&(a, _)| a != best)
        .map(|(_, &v)| row[best] - v)
        .fold(f64::INFINITY, f64::min)
}

/// Compares the final gaps of an error-free M-VI trace with the gaps of
/// the `(1−α)τ`-regularized optimum. For `α = 1` the growth of the gaps
/// is reported instead.
pub fn action_gap_profile(
    trace: &IterationTrace,
    mdp: &FiniteMdp,
    alpha: f64,
    tau: f64,
) -> Result<GapOutcome> {
    if trace.errors().any(|e| e.values().iter().any(|&v| v != 0.0)) {
        return invalid("action-gap analysis needs an error-free trace");
    }
    if !(0.0..=1.0).contains(&alpha) || !(tau > 0.0) {
        return invalid("alpha must lie in [0,1] and tau must be positive");
    }
    if alpha == 1.0 {
        let mean_gap: Vec<f64> = trace
            .entries
            .iter()
            .map(|e| {
                (0..mdp.num_states())
                    .map(|s| second_best_gap(&e.q, s))
                    .sum::<f64>()
                    / mdp.num_states() as f64
            })
            .collect();
        let monotone = mean_gap.windows(2).skip(1).all(|w| w[1] >= w[0]);
        return Ok(GapOutcome::Diverging(DivergenceReport {
            mean_gap,
            monotone,
            diverged_flag: trace.diverged,
        }));
    }
    let reg = (1.0 - alpha) * tau;
    let q_ref = solve_soft_q_star(mdp, reg, DEFAULT_TOL)?;
    let reference_gap = gaps(&q_ref);
    let predicted = (1.0 + alpha) / (1.0 - alpha);
    let derived = 1.0 / (1.0 - alpha);
    let last = trace.last();
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio = f64::NEG_INFINITY;
    let mut pairs = 0;
    for (g, r) in last.gaps.values().iter().zip(reference_gap.values()) {
        if *r > GAP_FLOOR {
            let ratio = g / r;
            min_ratio = min_ratio.min(ratio);
            max_ratio = max_ratio.max(ratio);
            pairs += 1;
        }
    }
    let deviation = |m: f64| {
        if pairs == 0 {
            0.0
        } else {
            ((min_ratio - m).abs()).max((max_ratio - m).abs()) / m
        }
    };
    Ok(GapOutcome::Converging(GapProfile {
        gaps: trace.entries.iter().map(|e| e.gaps.clone()).collect(),
        reference_gap,
        predicted_multiplier: predicted,
        derived_multiplier: derived,
        min_ratio,
        max_ratio,
        predicted_relative_deviation: deviation(predicted),
        derived_relative_deviation: deviation(derived),
        pairs_checked: pairs,
    }))
}

fn gaps(q: &QFunction) -> QFunction {
    let mut g = QFunction::zeros(q.num_states(), q.num_actions());
    for s in 0..q.num_states() {
        let m = q.row_max(s);
        for a in 0..q.num_actions() {
            g.set(s, a, m - q.get(s, a));
        }
    }
    g
}

/// The `α = 1` limit of M-VI without errors: `q*` on optimal actions and
/// `-inf` elsewhere. The result is an extended table; check
/// [`QFunction::is_finite`] before feeding it to finite-only code.
pub fn alpha_one_limit(q_star: &QFunction) -> QFunction {
    let mut out = q_star.clone();
    for s in 0..q_star.num_states() {
        let best = argmax_lowest(q_star.row(s));
        for a in 0..q_star.num_actions() {
            if a != best {
                out.set(s, a, f64::NEG_INFINITY);
            }
        }
    }
    out
}

/// Which bound a report evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundName {
    SupnormAlpha1,
    Cor1Componentwise,
    Cor2Componentwise,
}

impl BoundName {
    pub fn name(self) -> &'static str {
        match self {
            BoundName::SupnormAlpha1 => "supnorm_alpha1",
            BoundName::Cor1Componentwise => "cor1_componentwise",
            BoundName::Cor2Componentwise => "cor2_componentwise",
        }
    }
}

/// Parameters the bound was evaluated with.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundInputs {
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
    pub r_max: f64,
    pub num_actions: usize,
    pub error_model: String,
}

/// Evaluated left- and right-hand sides of a bound at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub bound: BoundName,
    pub k: usize,
    /// Scalar bounds use length-1 vectors.
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    /// `lhs ≤ rhs + BOUND_SLACK` everywhere.
    pub satisfied: bool,
    /// `min (rhs − lhs)`.
    pub slack: f64,
    /// `lhs ≥ −BOUND_SLACK` everywhere (the lower bound of the corollaries).
    pub lower_bound_ok: bool,
    /// Cor. 1 hypothesis `‖q_k − τ ln π_k‖∞ ≤ r_max/(1−γ)`, when applicable.
    pub hypothesis_ok: Option<bool>,
    pub inputs: BoundInputs,
}

impl BoundReport {
    fn new(
        bound: BoundName,
        k: usize,
        lhs: Vec<f64>,
        rhs: Vec<f64>,
        hypothesis_ok: Option<bool>,
        inputs: BoundInputs,
    ) -> Self {
        let satisfied = lhs.iter().zip(&rhs).all(|(l, r)| *l <= r + BOUND_SLACK);
        let slack = lhs
            .iter()
            .zip(&rhs)
            .map(|(l, r)| r - l)
            .fold(f64::INFINITY, f64::min);
        let lower_bound_ok = lhs.iter().all(|&l| l >= -BOUND_SLACK);
        Self {
            bound,
            k,
            lhs,
            rhs,
            satisfied,
            slack,
            lower_bound_ok,
            hypothesis_ok,
            inputs,
        }
    }

    pub fn max_lhs(&self) -> f64 {
        self.lhs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_rhs(&self) -> f64 {
        self.rhs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Column order of the bound CSV.
pub const BOUND_CSV_HEADER: [&str; 14] = [
    "bound",
    "k",
    "satisfied",
    "lower_bound_ok",
    "hypothesis_ok",
    "slack",
    "max_lhs",
    "max_rhs",
    "alpha",
    "tau",
    "gamma",
    "r_max",
    "num_actions",
    "error_model",
];

/// Writes one CSV row per report.
pub fn write_bound_csv<W: Write>(reports: &[BoundReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BOUND_CSV_HEADER)?;
    for r in reports {
        w.write_record([
            r.bound.name().to_string(),
            r.k.to_string(),
            r.satisfied.to_string(),
            r.lower_bound_ok.to_string(),
            r.hypothesis_ok.map_or(String::new(), |h| h.to_string()),
            r.slack.to_string(),
            r.max_lhs().to_string(),
            r.max_rhs().to_string(),
            r.inputs.alpha.to_string(),
            r.inputs.tau.to_string(),
            r.inputs.gamma.to_string(),
            r.inputs.r_max.to_string(),
            r.inputs.num_actions.to_string(),
            r.inputs.error_model.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn inputs(trace: &IterationTrace, mdp: &FiniteMdp, alpha: f64, tau: f64) -> BoundInputs {
    BoundInputs {
        alpha,
        tau,
        gamma: mdp.gamma(),
        r_max: mdp.r_max(),
        num_actions: mdp.num_actions(),
        error_model: trace.error_descriptor.clone(),
    }
}

fn require_alpha_one(trace: &IterationTrace) -> Result<()> {
    let munchausen = matches!(trace.scheme, Scheme::Mvi | Scheme::Cvi);
    if !munchausen || trace.params.alpha != 1.0 {
        return invalid("bound requires an M-VI(1, tau) trace");
    }
    Ok(())
}

/// Right-hand side of the sup-norm bound with zero errors:
/// `4/(1−γ)² · (r_max + τ ln|A|)/k`.
pub fn supnorm_bias_term(gamma: f64, r_max: f64, tau: f64, num_actions: usize, k: usize) -> f64 {
    4.0 / (1.0 - gamma).powi(2) * (r_max + tau * (num_actions as f64).ln()) / k as f64
}

/// `‖q* − q_{π_k}‖∞ ≤ 2/(1−γ)‖(1/k)Σ ε_j‖∞ + 4/(1−γ)²(r_max + τ ln|A|)/k`
/// evaluated for every `k ≥ 1` of an M-VI(1, τ) trace.
pub fn bound_supnorm_alpha1(
    trace: &IterationTrace,
    mdp: &FiniteMdp,
    tau: f64,
) -> Result<Vec<BoundReport>> {
    require_alpha_one(trace)?;
    let q_star = solve_q_star(mdp, DEFAULT_TOL)?;
    let gamma = mdp.gamma();
    let info = inputs(trace, mdp, 1.0, tau);
    let mut sum = QFunction::zeros(mdp.num_states(), mdp.num_actions());
    let mut out = Vec::new();
    for e in trace.entries.iter().skip(1) {
        sum = sum.axpy(1.0, &e.eps);
        let k = e.k;
        let q_pi = solve_q_pi(mdp, &e.policy, DEFAULT_TOL)?;
        let lhs = q_star.sup_distance(&q_pi);
        let rhs = 2.0 / (1.0 - gamma) * sum.sup_norm() / k as f64
            + supnorm_bias_term(gamma, mdp.r_max(), tau, mdp.num_actions(), k);
        out.push(BoundReport::new(
            BoundName::SupnormAlpha1,
            k,
            vec![lhs],
            vec![rhs],
            None,
            info.clone(),
        ));
    }
    Ok(out)
}

/// Component-wise bound for M-VI(1, τ):
/// `0 ≤ q* − q_{π_k} ≤ |A¹_k E_k/k| + 4/(1−γ)²(r_max + τ ln|A|)/k · 1`
/// with `E_k = −Σ_{j≤k} ε_j` and
/// `A¹_k = (I − γP_{π*})^{-1} − (I − γP_{π_k})^{-1}`.
pub fn bound_cor1(trace: &IterationTrace, mdp: &FiniteMdp, tau: f64) -> Result<Vec<BoundReport>> {
    require_alpha_one(trace)?;
    let q_star = solve_q_star(mdp, DEFAULT_TOL)?;
    let pi_star = greedy_policy(&q_star);
    let star_resolvent = Resolvent::new(mdp, &pi_star)?;
    let gamma = mdp.gamma();
    let horizon_cap = mdp.r_max() / (1.0 - gamma);
    let info = inputs(trace, mdp, 1.0, tau);
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut e_sum = QFunction::zeros(ns, na);
    let mut out = Vec::new();
    for e in trace.entries.iter().skip(1) {
        e_sum = e_sum.axpy(-1.0, &e.eps);
        let k = e.k;
        let q_pi = solve_q_pi(mdp, &e.policy, DEFAULT_TOL)?;
        let lhs = q_star.axpy(-1.0, &q_pi);
        let avg = e_sum.map(|v| v / k as f64);
        let k_resolvent = Resolvent::new(mdp, &e.policy)?;
        let a1 = star_resolvent.apply(&avg)?.axpy(-1.0, &k_resolvent.apply(&avg)?);
        let bias = supnorm_bias_term(gamma, mdp.r_max(), tau, na, k);
        let rhs: Vec<f64> = a1.values().iter().map(|v| v.abs() + bias).collect();
        let hypothesis = e.q_prime.sup_norm() <= horizon_cap;
        out.push(BoundReport::new(
            BoundName::Cor1Componentwise,
            k,
            lhs.into_values(),
            rhs,
            Some(hypothesis),
            info.clone(),
        ));
    }
    Ok(out)
}

/// Component-wise bound for M-VI(α < 1, τ), evaluated for the policy
/// `π_{k+1}` using errors `ε_1..ε_k` (report index `k`):
///
/// `0 ≤ q*^{τ'} − q^{τ'}_{π_{k+1}} ≤ Σ_{j=1}^k γ^{k−j}|A²_{k:j} E^α_j|
///   + γ^k (1 + (1−α)/(1−γ)) Σ_{j=0}^k (α/γ)^j (r_max + τ' ln|A|)/(1−γ) · 1`
///
/// with `τ' = (1−α)τ`, `E^α_j = (1−α) Σ_{i≤j} α^{j−i} ε_i` and
/// `A²_{k:j} = P_{π*'}^{k−j} + (I − γP_{π_{k+1}})^{-1} P_{k:j+1}(I − γP_{π_j})`.
pub fn bound_cor2(
    trace: &IterationTrace,
    mdp: &FiniteMdp,
    alpha: f64,
    tau: f64,
) -> Result<Vec<BoundReport>> {
    if !(0.0..1.0).contains(&alpha) {
        return invalid("Cor. 2 needs alpha < 1; use bound_cor1 for alpha = 1");
    }
    let munchausen = matches!(trace.scheme, Scheme::Mvi | Scheme::Cvi);
    if !munchausen || trace.params.alpha != alpha || trace.params.tau != tau {
        return invalid("bound requires an M-VI(alpha, tau) trace with matching parameters");
    }
    let reg = (1.0 - alpha) * tau;
    let gamma = mdp.gamma();
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let q_ref = solve_soft_q_star(mdp, reg, DEFAULT_TOL)?;
    let pi_ref = softmax_policy(&q_ref, reg)?;
    let info = inputs(trace, mdp, alpha, tau);
    let policies: Vec<&StochasticPolicy> = trace.entries.iter().map(|e| &e.policy).collect();

    // E^α_j for j = 0..K (E^α_0 = 0).
    let mut moving = vec![QFunction::zeros(ns, na)];
    for e in trace.entries.iter().skip(1) {
        let prev = moving.last().expect("non-empty");
        let next = prev.map(|v| alpha * v).axpy(1.0 - alpha, &e.eps);
        moving.push(next);
    }

    let base = (mdp.r_max() + reg * (na as f64).ln()) / (1.0 - gamma);
    let mut out = Vec::new();
    for k in 0..policies.len().saturating_sub(1) {
        let next_policy = policies[k + 1];
        let q_eval = solve_q_pi_regularized(mdp, next_policy, reg, DEFAULT_TOL)?;
        let lhs = q_ref.axpy(-1.0, &q_eval);
        let resolvent = Resolvent::new(mdp, next_policy)?;
        let mut error_term = vec![0.0; ns * na];
        for j in 1..=k {
            let x = &moving[j];
            if x.values().iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut first = x.clone();
            for _ in 0..(k - j) {
                first = apply_kernel(mdp, &pi_ref, &first);
            }
            let mut second = x.axpy(-gamma, &apply_kernel(mdp, policies[j], x));
            for policy in &policies[j + 1..=k] {
                second = apply_kernel(mdp, policy, &second);
            }
            let second = resolvent.apply(&second)?;
            let weight = gamma.powi((k - j) as i32);
            for ((acc, a), b) in error_term
                .iter_mut()
                .zip(first.values())
                .zip(second.values())
            {
                *acc += weight * (a + b).abs();
            }
        }
        let geometric: f64 = (0..=k).map(|j| (alpha / gamma).powi(j as i32)).sum();
        let bias = gamma.powi(k as i32) * (1.0 + (1.0 - alpha) / (1.0 - gamma)) * geometric * base;
        let rhs: Vec<f64> = error_term.iter().map(|v| v + bias).collect();
        out.push(BoundReport::new(
            BoundName::Cor2Componentwise,
            k,
            lhs.into_values(),
            rhs,
            None,
            info.clone(),
        ));
    }
    Ok(out)
}

/// Final `‖q* − q_{π_K}‖∞` of M-VI(1, τ) and of AVI driven by the same
/// error sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedRun {
    pub mvi_final: f64,
    pub avi_final: f64,
}

impl PairedRun {
    pub fn mvi_wins(&self) -> bool {
        self.mvi_final < self.avi_final
    }
}

pub fn paired_error_run(
    mdp: &FiniteMdp,
    tau: f64,
    error_model: &ErrorModel,
    iterations: usize,
) -> Result<PairedRun> {
    let q_star = solve_q_star(mdp, DEFAULT_TOL)?;
    let opts = RunOptions::new(iterations);
    let mvi = run_scheme(
        mdp,
        Scheme::Mvi,
        &TemperatureParams::new(tau, 1.0, -1.0)?,
        error_model,
        &opts,
    )?;
    let avi = run_scheme(
        mdp,
        Scheme::Avi,
        &TemperatureParams::new(0.0, 0.0, -1.0)?,
        error_model,
        &opts,
    )?;
    let value = |trace: &IterationTrace| -> Result<f64> {
        Ok(solve_q_pi(mdp, &trace.last().policy, DEFAULT_TOL)?.sup_distance(&q_star))
    };
    Ok(PairedRun {
        mvi_final: value(&mvi)?,
        avi_final: value(&avi)?,
    })
}

/// `‖q*^τ − q*‖∞` and its bound `τ ln|A|/(1−γ) + 2·tol`.
pub fn soft_optimum_gap(mdp: &FiniteMdp, tau: f64, tol: f64) -> Result<(f64, f64)> {
    let hard = solve_q_star(mdp, tol)?;
    let soft = solve_soft_q_star(mdp, tau, tol)?;
    let bound = tau * (mdp.num_actions() as f64).ln() / (1.0 - mdp.gamma()) + 2.0 * tol;
    Ok((hard.sup_distance(&soft), bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_garnet, GarnetSpec};

    fn garnet(seed: u64, gamma: f64) -> FiniteMdp {
        make_garnet(&GarnetSpec::new(15, 4, 3, seed), gamma).unwrap()
    }

    #[test]
    fn equivalence_alpha_zero_is_exact() {
        let mdp = garnet(0, 0.99);
        let r = check_equivalence(&mdp, 0.0, 0.03, 30, &ErrorModel::none()).unwrap();
        assert!(r.passed);
        assert!(r.max_policy_deviation < 1e-12);
    }

    #[test]
    fn equivalence_with_noise() {
        let mdp = garnet(1, 0.99);
        let r = check_equivalence(&mdp, 0.9, 0.03, 50, &ErrorModel::gaussian(0.1, 4)).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn mismatched_initialization_is_detected() {
        let mdp = garnet(2, 0.99);
        let q0 = QFunction::zeros(15, 4);
        let mut q_prime0 = q0.clone();
        q_prime0.set(0, 0, 0.5);
        let r = check_equivalence_from(
            &mdp,
            0.9,
            0.03,
            20,
            &ErrorModel::none(),
            q0,
            q_prime0,
            StochasticPolicy::uniform(15, 4),
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn gap_multipliers() {
        let mdp = garnet(3, 0.9);
        for (alpha, predicted) in [(0.0, 1.0), (0.5, 3.0), (0.9, 19.0)] {
            let params = TemperatureParams::new(0.03, alpha, -1.0).unwrap();
            let trace =
                run_scheme(&mdp, Scheme::Mvi, &params, &ErrorModel::none(), &RunOptions::new(500))
                    .unwrap();
            let GapOutcome::Converging(p) = action_gap_profile(&trace, &mdp, alpha, 0.03).unwrap()
            else {
                panic!("alpha < 1 must converge");
            };
            assert!((p.predicted_multiplier - predicted).abs() < 1e-12);
            assert!(p.pairs_checked > 0);
            assert!(p.derived_relative_deviation < 1e-6, "{p:?}");
        }
    }

    #[test]
    fn gap_profile_rejects_noisy_traces() {
        let mdp = garnet(3, 0.9);
        let params = TemperatureParams::new(0.03, 0.5, -1.0).unwrap();
        let trace =
            run_scheme(&mdp, Scheme::Mvi, &params, &ErrorModel::gaussian(0.1, 1), &RunOptions::new(5))
                .unwrap();
        assert!(action_gap_profile(&trace, &mdp, 0.5, 0.03).is_err());
    }

    #[test]
    fn alpha_one_gap_grows() {
        let mdp = garnet(4, 0.99);
        let params = TemperatureParams::new(0.03, 1.0, -1.0).unwrap();
        let trace =
            run_scheme(&mdp, Scheme::Mvi, &params, &ErrorModel::none(), &RunOptions::new(200)).unwrap();
        let GapOutcome::Diverging(d) = action_gap_profile(&trace, &mdp, 1.0, 0.03).unwrap() else {
            panic!("alpha = 1 must diverge");
        };
        assert!(d.growth(20, 200).unwrap() >= 10.0, "{:?}", d.growth(20, 200));
    }

    #[test]
    fn alpha_one_gap_grows_by_the_hard_gap_per_step() {
        // With α = 1, q_k = q'_k + τ ln π_k and ln π_k accumulates q'_j/τ,
        // so Δ_{k+1} − Δ_k → Δ(q*) as q'_k → q*.
        let mdp = garnet(4, 0.9);
        let params = TemperatureParams::new(0.03, 1.0, -1.0).unwrap();
        let trace =
            run_scheme(&mdp, Scheme::Mvi, &params, &ErrorModel::none(), &RunOptions::new(400)).unwrap();
        let hard = gaps(&solve_q_star(&mdp, DEFAULT_TOL).unwrap());
        let a = &trace.entries[399].gaps;
        let b = &trace.entries[400].gaps;
        for i in 0..hard.values().len() {
            let step = b.values()[i] - a.values()[i];
            assert!((step - hard.values()[i]).abs() < 1e-6, "{i}: {step} vs {}", hard.values()[i]);
        }
    }

    #[test]
    fn alpha_one_limit_sentinel() {
        let q = QFunction::from_rows(&[vec![1.0, 2.0], vec![0.5, 0.0]]).unwrap();
        let lim = alpha_one_limit(&q);
        assert!(!lim.is_finite());
        assert_eq!(lim.get(0, 1), 2.0);
        assert_eq!(lim.get(0, 0), f64::NEG_INFINITY);
    }

    #[test]
    fn supnorm_bias_arithmetic() {
        let v = supnorm_bias_term(0.99, 1.0, 0.03, 4, 100);
        let want = 40000.0 * (1.0 + 0.03 * 4f64.ln()) / 100.0;
        assert!((v - want).abs() < 1e-9);
        assert!((v - 416.6).abs() < 0.1);
    }

    #[test]
    fn supnorm_and_cor1_hold_without_errors() {
        let mdp = garnet(5, 0.9);
        let params = TemperatureParams::new(0.03, 1.0, -1.0).unwrap();
        let trace =
            run_scheme(&mdp, Scheme::Mvi, &params, &ErrorModel::none(), &RunOptions::new(60)).unwrap();
        let sup = bound_supnorm_alpha1(&trace, &mdp, 0.03).unwrap();
        let cor1 = bound_cor1(&trace, &mdp, 0.03).unwrap();
        assert_eq!(sup.len(), 60);
        for (s, c) in sup.iter().zip(&cor1) {
            assert!(s.satisfied && c.satisfied && c.lower_bound_ok);
            // E_k = 0: the component-wise right side is the constant bias term.
            let bias = supnorm_bias_term(0.9, mdp.r_max(), 0.03, 4, c.k);
            assert!(c.rhs.iter().all(|&r| (r - bias).abs() < 1e-12));
        }
    }

    #[test]
    fn cor1_compensation() {
        let mdp = garnet(6, 0.9);
        let params = TemperatureParams::new(0.03, 1.0, -1.0).unwrap();
        let k = 40;
        // Constant tables are annihilated by A¹_k, so use a varying one.
        let table = QFunction::from_vec(15, 4, (0..60).map(|i| 0.05 * (i % 7) as f64).collect()).unwrap();
        let constant: Vec<QFunction> = (0..k).map(|_| table.clone()).collect();
        let alternating: Vec<QFunction> = (0..k)
            .map(|i| table.map(|v| if i % 2 == 0 { v } else { -v }))
            .collect();
        let run = |seq: Vec<QFunction>| {
            let t = run_scheme(
                &mdp,
                Scheme::Mvi,
                &params,
                &ErrorModel::precomputed(seq),
                &RunOptions::new(k),
            )
            .unwrap();
            bound_cor1(&t, &mdp, 0.03).unwrap()
        };
        let c = run(constant);
        let a = run(alternating);
        assert!(c.iter().all(|r| r.satisfied && r.lower_bound_ok));
        assert!(a.iter().all(|r| r.satisfied && r.lower_bound_ok));
        let err_c = c.last().unwrap().rhs.iter().sum::<f64>();
        let err_a = a.last().unwrap().rhs.iter().sum::<f64>();
        assert!(err_a < err_c);
        assert!(a.last().unwrap().max_lhs() <= c.last().unwrap().max_lhs() + 1e-12);
    }

    #[test]
    fn cor1_rejects_other_traces() {
        let mdp = garnet(6, 0.9);
        let params = TemperatureParams::new(0.03, 0.5, -1.0).unwrap();
        let t = run_scheme(&mdp, Scheme::Mvi, &params, &ErrorModel::none(), &RunOptions::new(3)).unwrap();
        assert!(bound_cor1(&t, &mdp, 0.03).is_err());
        assert!(bound_supnorm_alpha1(&t, &mdp, 0.03).is_err());
        let t1 = run_scheme(
            &mdp,
            Scheme::Mvi,
            &TemperatureParams::new(0.03, 1.0, -1.0).unwrap(),
            &ErrorModel::none(),
            &RunOptions::new(3),
        )
        .unwrap();
        assert!(bound_cor2(&t1, &mdp, 1.0, 0.03).is_err());
    }

    #[test]
    fn cor2_without_errors() {
        let mdp = garnet(7, 0.99);
        let params = TemperatureParams::new(0.03, 0.5, -1.0).unwrap();
        let t = run_scheme(&mdp, Scheme::Mvi, &params, &ErrorModel::none(), &RunOptions::new(100)).unwrap();
        let reports = bound_cor2(&t, &mdp, 0.5, 0.03).unwrap();
        assert_eq!(reports.len(), 100);
        for r in &reports {
            assert!(r.satisfied && r.lower_bound_ok, "k={} slack={}", r.k, r.slack);
            let first = r.rhs[0];
            assert!(r.rhs.iter().all(|&v| v == first));
        }
    }

    #[test]
    fn cor2_alpha_zero_uses_raw_errors() {
        let mdp = garnet(8, 0.9);
        let params = TemperatureParams::new(0.03, 0.0, -1.0).unwrap();
        let t = run_scheme(&mdp, Scheme::Mvi, &params, &ErrorModel::gaussian(0.05, 2), &RunOptions::new(30))
            .unwrap();
        let reports = bound_cor2(&t, &mdp, 0.0, 0.03).unwrap();
        assert!(reports.iter().all(|r| r.satisfied && r.lower_bound_ok));
    }

    #[test]
    fn al_limit_is_linear_or_better() {
        let mdp = garnet(9, 0.9);
        let q0 = solve_q_star(&mdp, DEFAULT_TOL).unwrap();
        let r = al_limit(&mdp, 0.9, &[1e-2, 1e-4, 1e-6], q0, 20).unwrap();
        assert!(r.min_greedy_margin > 0.0);
        assert!(r.at_least_linear, "{r:?}");
    }

    #[test]
    fn soft_optimum_within_bound() {
        for seed in 0..5 {
            let mdp = garnet(seed, 0.99);
            let (gap, bound) = soft_optimum_gap(&mdp, 0.03, DEFAULT_TOL).unwrap();
            assert!(gap <= bound);
        }
        let (_, bound) = soft_optimum_gap(&garnet(0, 0.99), 0.03, DEFAULT_TOL).unwrap();
        assert!((bound - 0.03 * 4f64.ln() / 0.01).abs() < 1e-6);
    }
}
