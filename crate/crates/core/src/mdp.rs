//! Finite MDPs, tabular q-functions and policies, Bellman operators and
//! exact solvers for the unregularized and entropy-regularized problems.
//!
//! All tables are dense and row-major: a q-function is `|S|×|A|`, a
//! transition kernel is `|S|×|A|×|S|`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Resolvent;
use crate::regularized::{log_softmax_row, softmax_policy, stable_lse};

/// Default sup-norm tolerance of the exact solvers.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Iteration cap of the fixed-point solvers.
pub const MAX_ITERATIONS: usize = 1_000_000;
/// Largest `|S|·|A|` for which `q_π` is obtained by a direct linear solve.
pub const DIRECT_SOLVE_LIMIT: usize = 10_000;
/// Row-sum tolerance for stochastic rows.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// State-action value table `q[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QFunction {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![0.0; num_states * num_actions],
        }
    }

    pub fn constant(num_states: usize, num_actions: usize, c: f64) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![c; num_states * num_actions],
        }
    }

    pub fn from_vec(num_states: usize, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_states * num_actions {
            return Err(Error::ShapeMismatch {
                expected: format!("{num_states}x{num_actions}"),
                got: format!("{} entries", values.len()),
            });
        }
        Ok(Self {
            num_states,
            num_actions,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_actions) {
            return invalid("ragged q-function rows");
        }
        Self::from_vec(rows.len(), num_actions, rows.concat())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.num_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.num_actions.max(1))
    }

    /// True when every entry is finite. Tables carrying `-inf` sentinels
    /// (limit analysis only) fail this check.
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &QFunction) -> bool {
        self.num_states == other.num_states && self.num_actions == other.num_actions
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sup_distance(&self, other: &QFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Entry-wise `self + scale * other`.
    pub fn axpy(&self, scale: f64, other: &QFunction) -> QFunction {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        QFunction {
            num_states: self.num_states,
            num_actions: self.num_actions,
            values,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> QFunction {
        QFunction {
            num_states: self.num_states,
            num_actions: self.num_actions,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn row_max(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn shape_string(&self) -> String {
        format!("{}x{}", self.num_states, self.num_actions)
    }
}

/// Stochastic policy table `π[a|s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl StochasticPolicy {
    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    /// Builds a policy, validating every row against the simplex.
    pub fn from_probs(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions || num_actions == 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("{num_states}x{num_actions}"),
                got: format!("{} entries", probs.len()),
            });
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return invalid(format!("policy row {s} has entries outside [0,1]"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return invalid(format!("policy row {s} sums to {sum}"));
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub(crate) fn from_probs_unchecked(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), num_states * num_actions);
        Self {
            num_states,
            num_actions,
            probs,
        }
    }

    /// One-hot policy selecting `actions[s]` in every state.
    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return invalid(format!("action {a} out of range in state {s}"));
            }
            probs[s * num_actions + a] = 1.0;
        }
        Ok(Self {
            num_states: actions.len(),
            num_actions,
            probs,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.num_actions)
    }

    /// `⟨π, q⟩(s) = Σ_a π(a|s) q(s,a)`.
    pub fn expectation(&self, q: &QFunction) -> Vec<f64> {
        self.rows()
            .zip(q.rows())
            .map(|(p, q)| p.iter().zip(q).map(|(p, q)| if *p == 0.0 { 0.0 } else { p * q }).sum())
            .collect()
    }

    pub fn sup_distance(&self, other: &StochasticPolicy) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Index of the most likely action in each state (lowest index on ties).
    pub fn mode(&self) -> Vec<usize> {
        self.rows().map(argmax_lowest).collect()
    }

    fn shape_string(&self) -> String {
        format!("{}x{}", self.num_states, self.num_actions)
    }
}

/// Index of the maximum, ties broken towards the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Tabular MDP `{S, A, P, r, γ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    r_max: f64,
}

impl FiniteMdp {
    /// `transition` is `P[s][a][s']` flattened row-major, `reward` is
    /// `r[s][a]` flattened row-major.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidMdp("empty state or action space".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidMdp(format!("gamma {gamma} not in (0,1)")));
        }
        if transition.len() != num_states * num_actions * num_states {
            return Err(Error::InvalidMdp(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                num_states * num_actions * num_states
            )));
        }
        if reward.len() != num_states * num_actions {
            return Err(Error::InvalidMdp(format!(
                "reward has {} entries, expected {}",
                reward.len(),
                num_states * num_actions
            )));
        }
        for (i, row) in transition.chunks(num_states).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidMdp(format!(
                    "transition row (s={}, a={}) has entries outside [0,1]",
                    i / num_actions,
                    i % num_actions
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidMdp(format!(
                    "transition row (s={}, a={}) sums to {sum}",
                    i / num_actions,
                    i % num_actions
                )));
            }
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidMdp("non-finite reward".into()));
        }
        let r_max = reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        Ok(Self {
            num_states,
            num_actions,
            transition,
            reward,
            gamma,
            r_max,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    pub fn reward_table(&self) -> QFunction {
        QFunction::from_vec(self.num_states, self.num_actions, self.reward.clone())
            .expect("validated shape")
    }

    /// Same dynamics and rewards with another discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.transition.clone(),
            self.reward.clone(),
            gamma,
        )
    }

    /// `(P v)(s,a) = Σ_s' P(s'|s,a) v(s')`, flattened over `(s,a)`.
    pub fn expect_next(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.num_states);
        self.transition
            .chunks(self.num_states)
            .map(|row| row.iter().zip(v).map(|(p, v)| p * v).sum())
            .collect()
    }

    /// `r + γ P v` as a q-function.
    pub fn backup(&self, v: &[f64]) -> QFunction {
        let pv = self.expect_next(v);
        let values = self
            .reward
            .iter()
            .zip(&pv)
            .map(|(r, pv)| r + self.gamma * pv)
            .collect();
        QFunction::from_vec(self.num_states, self.num_actions, values).expect("validated shape")
    }

    /// State-to-state kernel `P^π(s'|s) = Σ_a π(a|s) P(s'|s,a)`, row-major.
    pub fn state_kernel(&self, policy: &StochasticPolicy) -> Vec<f64> {
        let n = self.num_states;
        let mut out = vec![0.0; n * n];
        for s in 0..n {
            for a in 0..self.num_actions {
                let p = policy.prob(s, a);
                if p == 0.0 {
                    continue;
                }
                let row = self.transition_row(s, a);
                for (o, t) in out[s * n..(s + 1) * n].iter_mut().zip(row) {
                    *o += p * t;
                }
            }
        }
        out
    }

    pub fn check_q(&self, q: &QFunction) -> Result<()> {
        if q.num_states() != self.num_states || q.num_actions() != self.num_actions {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.num_states, self.num_actions),
                got: q.shape_string(),
            });
        }
        Ok(())
    }

    pub fn check_policy(&self, policy: &StochasticPolicy) -> Result<()> {
        if policy.num_states() != self.num_states || policy.num_actions() != self.num_actions {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.num_states, self.num_actions),
                got: policy.shape_string(),
            });
        }
        Ok(())
    }

    /// Reads an MDP from the TOML file format.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: MdpFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        file.into_mdp()
    }

    pub fn to_toml_string(&self) -> String {
        let file = MdpFile {
            num_states: self.num_states,
            num_actions: self.num_actions,
            gamma: self.gamma,
            reward: self.reward.clone(),
            transition: self
                .transition
                .chunks(self.num_states)
                .map(<[f64]>::to_vec)
                .collect(),
        };
        toml::to_string(&file).expect("plain data serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}

/// On-disk MDP document: rewards row-major over `(s,a)`, transitions as
/// `|S|·|A|` rows of `|S|` probabilities ordered by `(s,a)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpFile {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub reward: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
}

impl MdpFile {
    pub fn into_mdp(self) -> Result<FiniteMdp> {
        if self.transition.len() != self.num_states * self.num_actions {
            return Err(Error::InvalidMdp(format!(
                "expected {} transition rows, found {}",
                self.num_states * self.num_actions,
                self.transition.len()
            )));
        }
        if self.transition.iter().any(|r| r.len() != self.num_states) {
            return Err(Error::InvalidMdp("transition row of wrong length".into()));
        }
        FiniteMdp::new(
            self.num_states,
            self.num_actions,
            self.transition.concat(),
            self.reward,
            self.gamma,
        )
    }
}

/// `T_π q = r + γ P⟨π, q⟩`.
pub fn bellman_eval(mdp: &FiniteMdp, policy: &StochasticPolicy, q: &QFunction) -> Result<QFunction> {
    mdp.check_policy(policy)?;
    mdp.check_q(q)?;
    Ok(mdp.backup(&policy.expectation(q)))
}

/// Hard-max optimality backup `r + γ P max_a q`.
pub fn bellman_optimality(mdp: &FiniteMdp, q: &QFunction) -> QFunction {
    let v: Vec<f64> = (0..q.num_states()).map(|s| q.row_max(s)).collect();
    mdp.backup(&v)
}

/// Soft optimality backup `r + γ P (τ ln⟨1, exp(q/τ)⟩)`.
pub fn soft_bellman_optimality(mdp: &FiniteMdp, q: &QFunction, tau: f64) -> QFunction {
    let v: Vec<f64> = q.rows().map(|row| stable_lse_unchecked(row, tau)).collect();
    mdp.backup(&v)
}

fn stable_lse_unchecked(row: &[f64], tau: f64) -> f64 {
    stable_lse(row, tau).expect("non-empty row and positive temperature")
}

/// Value `q_π` of a policy, the fixed point of [`bellman_eval`].
pub fn solve_q_pi(mdp: &FiniteMdp, policy: &StochasticPolicy, tol: f64) -> Result<QFunction> {
    let zero = QFunction::zeros(mdp.num_states(), mdp.num_actions());
    solve_q_pi_with_bonus(mdp, policy, &vec![0.0; mdp.num_states()], tol, &zero)
}

/// Value `q^τ_π` of a policy in the MDP regularized by `τ·H`:
/// `q = r + γ P(⟨π, q⟩ + τ H(π))`.
pub fn solve_q_pi_regularized(
    mdp: &FiniteMdp,
    policy: &StochasticPolicy,
    tau: f64,
    tol: f64,
) -> Result<QFunction> {
    if tau < 0.0 {
        return invalid("temperature must be non-negative");
    }
    let bonus: Vec<f64> = crate::regularized::entropy(policy)
        .into_iter()
        .map(|h| tau * h)
        .collect();
    let zero = QFunction::zeros(mdp.num_states(), mdp.num_actions());
    solve_q_pi_with_bonus(mdp, policy, &bonus, tol, &zero)
}

/// Fixed point of `q = r + γ P(⟨π, q⟩ + bonus)`.
fn solve_q_pi_with_bonus(
    mdp: &FiniteMdp,
    policy: &StochasticPolicy,
    bonus: &[f64],
    tol: f64,
    init: &QFunction,
) -> Result<QFunction> {
    mdp.check_policy(policy)?;
    if !(tol > 0.0) {
        return invalid("tolerance must be positive");
    }
    let step = |q: &QFunction| {
        let v: Vec<f64> = policy
            .expectation(q)
            .iter()
            .zip(bonus)
            .map(|(v, b)| v + b)
            .collect();
        mdp.backup(&v)
    };
    if mdp.num_states() * mdp.num_actions() <= DIRECT_SOLVE_LIMIT {
        // q = r + γP(v + b) with v = ⟨π, q⟩ = r_π + γP^π v + γP^π b.
        let rq = step(&QFunction::zeros(mdp.num_states(), mdp.num_actions()));
        let rhs = policy.expectation(&rq);
        let resolvent = Resolvent::new(mdp, policy)?;
        let v = resolvent.solve_states(&rhs)?;
        let q = step_from_state_values(mdp, &v, bonus);
        if step(&q).sup_distance(&q) <= tol {
            return Ok(q);
        }
        return iterate_to_tolerance(q, tol, step);
    }
    iterate_to_tolerance(init.clone(), tol, step)
}

fn step_from_state_values(mdp: &FiniteMdp, v: &[f64], bonus: &[f64]) -> QFunction {
    let vb: Vec<f64> = v.iter().zip(bonus).map(|(v, b)| v + b).collect();
    mdp.backup(&vb)
}

fn iterate_to_tolerance(
    mut q: QFunction,
    tol: f64,
    step: impl Fn(&QFunction) -> QFunction,
) -> Result<QFunction> {
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        let next = step(&q);
        residual = next.sup_distance(&q);
        q = next;
        if residual <= tol {
            return Ok(q);
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITERATIONS,
        residual,
    })
}

/// Optimal q-function `q*` by value iteration, polished by exact policy
/// iteration so the result is accurate well below `tol`.
pub fn solve_q_star(mdp: &FiniteMdp, tol: f64) -> Result<QFunction> {
    if !(tol > 0.0) {
        return invalid("tolerance must be positive");
    }
    let init = QFunction::zeros(mdp.num_states(), mdp.num_actions());
    let q_vi = iterate_to_tolerance(init, tol, |q| bellman_optimality(mdp, q))?;
    if mdp.num_states() * mdp.num_actions() > DIRECT_SOLVE_LIMIT {
        return Ok(q_vi);
    }
    let residual = |q: &QFunction| bellman_optimality(mdp, q).sup_distance(q);
    let mut best_residual = residual(&q_vi);
    let mut best = q_vi.clone();
    let mut policy = greedy_policy(&q_vi);
    for _ in 0..100 {
        let q = solve_q_pi(mdp, &policy, tol)?;
        let r = residual(&q);
        if r < best_residual {
            best_residual = r;
            best = q.clone();
        }
        let next = greedy_policy(&q);
        if next == policy {
            break;
        }
        policy = next;
    }
    Ok(best)
}

/// Entropy-regularized optimal q-function `q*^τ`, fixed point of the soft
/// backup. Polished by soft policy iteration.
pub fn solve_soft_q_star(mdp: &FiniteMdp, tau: f64, tol: f64) -> Result<QFunction> {
    if !(tau > 0.0) {
        return invalid("temperature must be positive; use solve_q_star for tau = 0");
    }
    if !(tol > 0.0) {
        return invalid("tolerance must be positive");
    }
    let init = QFunction::zeros(mdp.num_states(), mdp.num_actions());
    let q_vi = iterate_to_tolerance(init, tol, |q| soft_bellman_optimality(mdp, q, tau))?;
    if mdp.num_states() * mdp.num_actions() > DIRECT_SOLVE_LIMIT {
        return Ok(q_vi);
    }
    let residual = |q: &QFunction| soft_bellman_optimality(mdp, q, tau).sup_distance(q);
    let mut best_residual = residual(&q_vi);
    let mut best = q_vi.clone();
    let mut q = q_vi;
    for _ in 0..20 {
        let policy = softmax_policy(&q, tau)?;
        let next = solve_q_pi_regularized(mdp, &policy, tau, tol)?;
        let r = residual(&next);
        let improved = r < best_residual;
        if improved {
            best_residual = r;
            best = next.clone();
        }
        q = next;
        if !improved || r == 0.0 {
            break;
        }
    }
    Ok(best)
}

/// Greedy one-hot policy; ties go to the lowest action index.
pub fn greedy_policy(q: &QFunction) -> StochasticPolicy {
    let actions: Vec<usize> = q.rows().map(argmax_lowest).collect();
    StochasticPolicy::deterministic(q.num_actions(), &actions).expect("indices in range")
}

/// Optimal regularized policy `softmax(q*^τ/τ)` with its log-probabilities.
pub fn soft_optimal_policy(q_soft: &QFunction, tau: f64) -> Result<(StochasticPolicy, QFunction)> {
    let policy = softmax_policy(q_soft, tau)?;
    let mut log_pi = QFunction::zeros(q_soft.num_states(), q_soft.num_actions());
    for s in 0..q_soft.num_states() {
        let row = log_softmax_row(q_soft.row(s), tau)?;
        for (a, v) in row.into_iter().enumerate() {
            log_pi.set(s, a, v / tau);
        }
    }
    Ok((policy, log_pi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(r: Vec<f64>, gamma: f64) -> FiniteMdp {
        let a = r.len();
        FiniteMdp::new(1, a, vec![1.0; a], r, gamma).unwrap()
    }

    /// Deterministic chain 0 -> 1 -> 2 -> absorbing 3, reward 1 on leaving 2.
    fn chain(gamma: f64) -> FiniteMdp {
        let mut p = vec![0.0; 4 * 4];
        for s in 0..4 {
            let next = (s + 1).min(3);
            p[s * 4 + next] = 1.0;
        }
        let r = vec![0.0, 0.0, 1.0, 0.0];
        FiniteMdp::new(4, 1, p, r, gamma).unwrap()
    }

    #[test]
    fn rejects_bad_kernel_and_gamma() {
        assert!(FiniteMdp::new(1, 1, vec![0.9], vec![0.0], 0.5).is_err());
        assert!(FiniteMdp::new(1, 1, vec![1.0], vec![0.0], 1.0).is_err());
        assert!(FiniteMdp::new(1, 1, vec![1.0], vec![0.0], 0.0).is_err());
        assert!(FiniteMdp::new(2, 1, vec![1.5, -0.5, 0.0, 1.0], vec![0.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn r_max_is_max_abs_reward() {
        let m = single(vec![0.5, -2.0], 0.9);
        assert_eq!(m.r_max(), 2.0);
    }

    #[test]
    fn bellman_eval_single_state_fixed_point() {
        let m = single(vec![1.0], 0.5);
        let pi = StochasticPolicy::uniform(1, 1);
        let q = QFunction::constant(1, 1, 2.0);
        let out = bellman_eval(&m, &pi, &q).unwrap();
        assert_eq!(out.get(0, 0), 2.0);
    }

    #[test]
    fn bellman_eval_shape_mismatch() {
        let m = single(vec![1.0, 0.0], 0.5);
        let pi = StochasticPolicy::uniform(1, 2);
        assert!(bellman_eval(&m, &pi, &QFunction::zeros(2, 2)).is_err());
    }

    #[test]
    fn q_pi_single_state() {
        let m = single(vec![1.0], 0.9);
        let q = solve_q_pi(&m, &StochasticPolicy::uniform(1, 1), DEFAULT_TOL).unwrap();
        assert!((q.get(0, 0) - 10.0).abs() < 1e-10);
    }

    #[test]
    fn q_pi_two_state_symmetric_chain() {
        // Action 0 stays, action 1 switches; r(s0,.)=1, r(s1,.)=0.
        // Under the uniform policy v = r_π + γ P^π v with P^π = [[.5,.5],[.5,.5]],
        // r_π = (1, 0): v0 - v1 = 1, v0 + v1 = 1/(1-γ). With γ = 0.5:
        // v0 = 1.5, v1 = 0.5; q(0,·) = 1 + 0.5·(1.5+0.5)/2·... computed below.
        let p = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let r = vec![1.0, 1.0, 0.0, 0.0];
        let m = FiniteMdp::new(2, 2, p, r, 0.5).unwrap();
        let q = solve_q_pi(&m, &StochasticPolicy::uniform(2, 2), DEFAULT_TOL).unwrap();
        // q(0,stay) = 1 + 0.5·v0 = 1.75, q(0,switch) = 1 + 0.5·v1 = 1.25,
        // q(1,stay) = 0.5·v1 = 0.25, q(1,switch) = 0.5·v0 = 0.75.
        let expected = [1.75, 1.25, 0.25, 0.75];
        for (got, want) in q.values().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn q_star_chain_backward_induction() {
        let m = chain(0.5);
        let q = solve_q_star(&m, DEFAULT_TOL).unwrap();
        // q*(2) = 1, q*(1) = γ·1, q*(0) = γ²·1.
        assert!((q.get(2, 0) - 1.0).abs() < 1e-12);
        assert!((q.get(1, 0) - 0.5).abs() < 1e-12);
        assert!((q.get(0, 0) - 0.25).abs() < 1e-12);
        assert!(q.get(3, 0).abs() < 1e-12);
    }

    #[test]
    fn q_star_bounded_by_geometric_series() {
        let m = chain(0.9);
        let q = solve_q_star(&m, DEFAULT_TOL).unwrap();
        assert!(q.sup_norm() <= m.r_max() / (1.0 - m.gamma()) + 1e-12);
    }

    #[test]
    fn soft_q_star_symmetric_fixed_point() {
        let m = single(vec![0.0, 0.0], 0.5);
        let q = solve_soft_q_star(&m, 1.0, DEFAULT_TOL).unwrap();
        let want = 2.0_f64.ln();
        for &v in q.values() {
            assert!((v - want).abs() < 1e-10);
        }
    }

    #[test]
    fn soft_q_star_rejects_zero_tau() {
        let m = single(vec![0.0, 0.0], 0.5);
        assert!(solve_soft_q_star(&m, 0.0, DEFAULT_TOL).is_err());
    }

    #[test]
    fn greedy_ties_and_choice() {
        let q = QFunction::from_rows(&[vec![0.1, 0.9], vec![1.0, 1.0]]).unwrap();
        let pi = greedy_policy(&q);
        assert_eq!(pi.row(0), &[0.0, 1.0]);
        assert_eq!(pi.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn toml_round_trip() {
        let m = chain(0.9);
        let back = FiniteMdp::from_toml_str(&m.to_toml_string()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn toml_rejects_bad_rows() {
        let text = "num_states = 1\nnum_actions = 1\ngamma = 0.5\nreward = [0.0]\ntransition = [[0.5]]\n";
        assert!(FiniteMdp::from_toml_str(text).is_err());
    }
}
