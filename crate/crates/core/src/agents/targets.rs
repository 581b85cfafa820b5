//! Regression targets of the DQN family and the Huber loss.
//!
//! All targets are built from target-network values and are treated as
//! constants by the optimizer.

use crate::agents::config::LossKind;
use crate::error::{invalid, Error, Result};
use crate::regularized::{clip_log_policy, log_softmax_row, softmax_row, stable_lse};

/// A sampled batch with target-network values on both ends of each
/// transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TdBatch {
    pub rewards: Vec<f64>,
    pub actions: Vec<usize>,
    pub terminals: Vec<bool>,
    /// `q_θ̄(s_t, ·)`, needed by the Munchausen and AL terms.
    pub target_q_current: Vec<Vec<f64>>,
    /// `q_θ̄(s_{t+1}, ·)`.
    pub target_q_next: Vec<Vec<f64>>,
}

impl TdBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rewards.len();
        if self.actions.len() != n
            || self.terminals.len() != n
            || self.target_q_current.len() != n
            || self.target_q_next.len() != n
        {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} entries per field"),
                got: "fields of differing lengths".into(),
            });
        }
        for i in 0..n {
            let na = self.target_q_next[i].len();
            if na == 0 || self.target_q_current[i].len() != na || self.actions[i] >= na {
                return invalid(format!("sample {i}: inconsistent action dimensions"));
            }
        }
        Ok(())
    }

    fn bootstrap(&self, i: usize, gamma: f64, value: f64) -> f64 {
        if self.terminals[i] {
            0.0
        } else {
            gamma * value
        }
    }
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `r + γ max_a' q_θ̄(s', a')`.
pub fn dqn_target(batch: &TdBatch, gamma: f64) -> Result<Vec<f64>> {
    batch.validate()?;
    Ok((0..batch.len())
        .map(|i| batch.rewards[i] + batch.bootstrap(i, gamma, row_max(&batch.target_q_next[i])))
        .collect())
}

/// `r + γ τ ln Σ_a' exp(q_θ̄(s', a')/τ)`.
pub fn soft_dqn_target(batch: &TdBatch, gamma: f64, tau: f64) -> Result<Vec<f64>> {
    batch.validate()?;
    (0..batch.len())
        .map(|i| {
            let v = stable_lse(&batch.target_q_next[i], tau)?;
            Ok(batch.rewards[i] + batch.bootstrap(i, gamma, v))
        })
        .collect()
}

/// `Σ_a π(a)(q(a) − τ ln π(a))` with `π = softmax(q/τ)`.
fn soft_value_expectation(row: &[f64], tau: f64) -> Result<f64> {
    let pi = softmax_row(row, tau)?;
    let log_pi = log_softmax_row(row, tau)?;
    Ok(pi
        .iter()
        .zip(row)
        .zip(&log_pi)
        .filter(|((p, _), _)| **p > 0.0)
        .map(|((p, q), l)| p * (q - l))
        .sum())
}

/// Soft-DQN target in its expectation form,
/// `r + γ Σ_a' π_θ̄(a'|s')(q_θ̄(s', a') − τ ln π_θ̄(a'|s'))`.
pub fn soft_dqn_target_expectation(batch: &TdBatch, gamma: f64, tau: f64) -> Result<Vec<f64>> {
    batch.validate()?;
    (0..batch.len())
        .map(|i| {
            let v = soft_value_expectation(&batch.target_q_next[i], tau)?;
            Ok(batch.rewards[i] + batch.bootstrap(i, gamma, v))
        })
        .collect()
}

/// `α · clip(τ ln π_θ̄(a_t|s_t), l0, 0)`.
pub fn munchausen_term(target_q_current: &[f64], action: usize, tau: f64, alpha: f64, l0: f64) -> Result<f64> {
    let log_pi = log_softmax_row(target_q_current, tau)?;
    Ok(alpha * clip_log_policy(log_pi[action], l0))
}

/// Soft-DQN target plus the Munchausen term. Terminal transitions drop
/// the bootstrap only.
pub fn mdqn_target(batch: &TdBatch, gamma: f64, tau: f64, alpha: f64, l0: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) || !(l0 <= 0.0) {
        return invalid("m_dqn needs alpha in [0,1] and l0 <= 0");
    }
    let soft = soft_dqn_target(batch, gamma, tau)?;
    if alpha == 0.0 {
        return Ok(soft);
    }
    soft.into_iter()
        .enumerate()
        .map(|(i, y)| Ok(y + munchausen_term(&batch.target_q_current[i], batch.actions[i], tau, alpha, l0)?))
        .collect()
}

/// `r + α(q_θ̄(s, a) − max_b q_θ̄(s, b)) + γ max_a' q_θ̄(s', a')`.
pub fn al_loss_target(batch: &TdBatch, gamma: f64, alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return invalid("al needs alpha in [0,1]");
    }
    let base = dqn_target(batch, gamma)?;
    if alpha == 0.0 {
        return Ok(base);
    }
    Ok(base
        .into_iter()
        .enumerate()
        .map(|(i, y)| {
            let row = &batch.target_q_current[i];
            y + alpha * (row[batch.actions[i]] - row_max(row))
        })
        .collect())
}

/// Target of the configured loss kind.
pub fn compute_targets(
    kind: LossKind,
    batch: &TdBatch,
    gamma: f64,
    tau: f64,
    alpha: f64,
    l0: f64,
) -> Result<Vec<f64>> {
    match kind {
        LossKind::Dqn => dqn_target(batch, gamma),
        LossKind::SoftDqn => soft_dqn_target(batch, gamma, tau),
        LossKind::MDqn => mdqn_target(batch, gamma, tau, alpha, l0),
        LossKind::Al => al_loss_target(batch, gamma, alpha),
    }
}

/// Quantile values of one transition for the M-IQN TD error.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSample {
    pub action: usize,
    pub terminal: bool,
    /// Fraction `σ` of the online quantile.
    pub sigma: f64,
    /// Fraction `σ'` of the target quantile.
    pub sigma_next: f64,
    /// `z_σ(s_t, a_t)`.
    pub z_current: f64,
    /// `z_σ'(s_{t+1}, ·)`.
    pub z_next: Vec<f64>,
    /// `q̃(s_t, ·)`, mean over sampled quantiles.
    pub q_tilde_current: Vec<f64>,
    /// `q̃(s_{t+1}, ·)`.
    pub q_tilde_next: Vec<f64>,
}

impl QuantileSample {
    pub fn validate(&self) -> Result<()> {
        let na = self.z_next.len();
        if na == 0 || self.q_tilde_current.len() != na || self.q_tilde_next.len() != na || self.action >= na {
            return invalid("quantile sample has inconsistent action dimensions");
        }
        if !(0.0..=1.0).contains(&self.sigma) || !(0.0..=1.0).contains(&self.sigma_next) {
            return invalid("quantile fractions must lie in [0, 1]");
        }
        let finite = self.z_current.is_finite()
            && self
                .z_next
                .iter()
                .chain(&self.q_tilde_current)
                .chain(&self.q_tilde_next)
                .all(|v| v.is_finite());
        if !finite {
            return invalid("quantile values must be finite");
        }
        Ok(())
    }
}

/// M-IQN TD error for one pair of quantile fractions:
/// `r + α clip(τ ln π(a_t|s_t)) + γ Σ_a π(a|s')(z_σ'(s', a) − τ ln π(a|s')) − z_σ(s_t, a_t)`
/// with `π = softmax(q̃/τ)`.
pub fn miqn_td_target(
    sample: &QuantileSample,
    reward: f64,
    tau: f64,
    alpha: f64,
    l0: f64,
    gamma: f64,
) -> Result<f64> {
    sample.validate()?;
    let bonus = munchausen_term(&sample.q_tilde_current, sample.action, tau, alpha, l0)?;
    let bootstrap = if sample.terminal {
        0.0
    } else {
        let pi = softmax_row(&sample.q_tilde_next, tau)?;
        let log_pi = log_softmax_row(&sample.q_tilde_next, tau)?;
        let v: f64 = pi
            .iter()
            .zip(&sample.z_next)
            .zip(&log_pi)
            .filter(|((p, _), _)| **p > 0.0)
            .map(|((p, z), l)| p * (z - l))
            .sum();
        gamma * v
    };
    Ok(reward + bonus + bootstrap - sample.z_current)
}

/// `½x²` for `|x| ≤ κ`, else `κ(|x| − κ/2)`.
pub fn huber(x: f64, kappa: f64) -> f64 {
    if x.abs() <= kappa {
        0.5 * x * x
    } else {
        kappa * (x.abs() - 0.5 * kappa)
    }
}

pub fn huber_grad(x: f64, kappa: f64) -> f64 {
    x.clamp(-kappa, kappa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(reward: f64, action: usize, terminal: bool, cur: Vec<f64>, next: Vec<f64>) -> TdBatch {
        TdBatch {
            rewards: vec![reward],
            actions: vec![action],
            terminals: vec![terminal],
            target_q_current: vec![cur],
            target_q_next: vec![next],
        }
    }

    #[test]
    fn dqn_trivial_cases() {
        let b = single(1.0, 0, true, vec![0.0, 0.0], vec![5.0, 3.0]);
        assert_eq!(dqn_target(&b, 0.99).unwrap(), vec![1.0]);
        let b = single(0.5, 0, false, vec![0.0, 0.0], vec![5.0, 3.0]);
        assert_eq!(dqn_target(&b, 0.0).unwrap(), vec![0.5]);
        assert_eq!(dqn_target(&b, 0.5).unwrap(), vec![3.0]);
    }

    #[test]
    fn soft_constant_row() {
        let b = single(1.0, 0, false, vec![0.0; 4], vec![2.0; 4]);
        let want = 1.0 + 0.9 * (2.0 + 0.03 * 4f64.ln());
        assert!((soft_dqn_target(&b, 0.9, 0.03).unwrap()[0] - want).abs() < 1e-12);
        assert!((soft_dqn_target_expectation(&b, 0.9, 0.03).unwrap()[0] - want).abs() < 1e-12);
        assert!(soft_dqn_target(&b, 0.9, 0.0).is_err());
    }

    #[test]
    fn soft_small_tau_approaches_dqn() {
        let b = single(0.0, 0, false, vec![0.0; 3], vec![1.0, 0.2, 0.7]);
        let soft = soft_dqn_target(&b, 0.99, 1e-6).unwrap()[0];
        let hard = dqn_target(&b, 0.99).unwrap()[0];
        assert!((soft - hard).abs() < 1e-5);
    }

    #[test]
    fn munchausen_closed_form() {
        let b = single(0.0, 2, false, vec![1.0; 4], vec![0.0; 4]);
        let soft = soft_dqn_target(&b, 0.99, 0.03).unwrap()[0];
        let m = mdqn_target(&b, 0.99, 0.03, 0.9, -1.0).unwrap()[0];
        let term = 0.9 * (0.03 * -(4f64.ln()));
        assert!((m - soft - term).abs() < 1e-12);
        assert!((term + 0.0374).abs() < 1e-4);
    }

    #[test]
    fn munchausen_clip_engages() {
        let b = single(0.0, 1, false, vec![10.0, 0.0], vec![0.0; 2]);
        let soft = soft_dqn_target(&b, 0.99, 0.03).unwrap()[0];
        let m = mdqn_target(&b, 0.99, 0.03, 0.9, -1.0).unwrap()[0];
        assert_eq!(m - soft, -0.9);
    }

    #[test]
    fn terminal_keeps_munchausen_term() {
        let b = single(1.0, 1, true, vec![0.2, 0.0], vec![7.0, 7.0]);
        let m = mdqn_target(&b, 0.99, 1.0, 0.9, -1.0).unwrap()[0];
        let log_pi = log_softmax_row(&[0.2, 0.0], 1.0).unwrap()[1];
        assert!(log_pi > -1.0);
        assert!((m - (1.0 + 0.9 * log_pi)).abs() < 1e-12);
    }

    #[test]
    fn al_greedy_action_reduces_to_dqn() {
        let b = single(0.3, 1, false, vec![0.0, 2.0], vec![1.0, 0.5]);
        assert_eq!(al_loss_target(&b, 0.9, 0.9).unwrap(), dqn_target(&b, 0.9).unwrap());
        let b = single(0.3, 0, false, vec![0.0, 2.0], vec![1.0, 0.5]);
        let want = 0.3 + 0.9 * (0.0 - 2.0) + 0.9;
        assert!((al_loss_target(&b, 0.9, 0.9).unwrap()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn huber_values() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(-2.0, 1.0), 1.5);
        assert_eq!(huber(0.5, 1.0), 0.125);
        let h = 1e-7;
        for k in [1.0, -1.0] {
            let left = (huber(k, 1.0) - huber(k - h, 1.0)) / h;
            let right = (huber(k + h, 1.0) - huber(k, 1.0)) / h;
            assert!((left - right).abs() < 1e-6);
        }
    }

    #[test]
    fn miqn_reduces_to_iqn_td() {
        let s = QuantileSample {
            action: 0,
            terminal: false,
            sigma: 0.3,
            sigma_next: 0.6,
            z_current: 0.4,
            z_next: vec![1.5, -0.5, 0.2],
            q_tilde_current: vec![0.0, 0.1, 0.2],
            q_tilde_next: vec![5.0, 0.0, 0.0],
        };
        let td = miqn_td_target(&s, 1.0, 1e-6, 0.0, -1.0, 0.9).unwrap();
        assert!((td - (1.0 + 0.9 * 1.5 - 0.4)).abs() < 1e-9);
        let mut bad = s.clone();
        bad.sigma = 1.5;
        assert!(miqn_td_target(&bad, 1.0, 0.03, 0.9, -1.0, 0.9).is_err());
    }

    #[test]
    fn shape_checks() {
        let mut b = single(0.0, 3, false, vec![0.0; 2], vec![0.0; 2]);
        assert!(dqn_target(&b, 0.9).is_err());
        b.actions[0] = 0;
        b.rewards.push(1.0);
        assert!(dqn_target(&b, 0.9).is_err());
    }

    fn row() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, 4)
    }

    proptest! {
        #[test]
        fn soft_forms_agree(next in row(), r in -1.0f64..1.0, tau in 0.01f64..2.0) {
            let b = single(r, 0, false, vec![0.0; 4], next);
            let a = soft_dqn_target(&b, 0.99, tau).unwrap()[0];
            let e = soft_dqn_target_expectation(&b, 0.99, tau).unwrap()[0];
            prop_assert!((a - e).abs() < 1e-9);
        }

        #[test]
        fn munchausen_term_range(cur in row(), a in 0usize..4, tau in 0.001f64..1.0, alpha in 0.0f64..=1.0, l0 in -3.0f64..0.0) {
            let t = munchausen_term(&cur, a, tau, alpha, l0).unwrap();
            prop_assert!(t <= 0.0 && t >= alpha * l0 - 1e-15);
        }

        #[test]
        fn mdqn_shift_decomposition(cur in row(), next in row(), c in -3.0f64..3.0, a in 0usize..4) {
            // Shifting q_θ̄ by a per-state constant leaves the policy factors
            // alone and moves the log-sum-exp bootstrap by γc.
            let (gamma, tau) = (0.9, 0.3);
            let base = single(0.2, a, false, cur.clone(), next.clone());
            let shifted = single(
                0.2,
                a,
                false,
                cur.iter().map(|v| v + c).collect(),
                next.iter().map(|v| v + c).collect(),
            );
            let y0 = mdqn_target(&base, gamma, tau, 0.9, -1.0).unwrap()[0];
            let y1 = mdqn_target(&shifted, gamma, tau, 0.9, -1.0).unwrap()[0];
            prop_assert!((y1 - y0 - gamma * c).abs() < 1e-9);
            let m0 = munchausen_term(&cur, a, tau, 0.9, -1.0).unwrap();
            let m1 = munchausen_term(&shifted.target_q_current[0], a, tau, 0.9, -1.0).unwrap();
            prop_assert!((m0 - m1).abs() < 1e-12);
        }

        #[test]
        fn miqn_degenerate_matches_mdqn(cur in row(), next in row(), a in 0usize..4, r in -1.0f64..1.0, terminal: bool) {
            let (gamma, tau, alpha, l0) = (0.99, 0.03, 0.9, -1.0);
            let b = single(r, a, terminal, cur.clone(), next.clone());
            let y = mdqn_target(&b, gamma, tau, alpha, l0).unwrap()[0];
            let s = QuantileSample {
                action: a,
                terminal,
                sigma: 0.5,
                sigma_next: 0.5,
                z_current: cur[a],
                z_next: next.clone(),
                q_tilde_current: cur.clone(),
                q_tilde_next: next,
            };
            let td = miqn_td_target(&s, r, tau, alpha, l0, gamma).unwrap();
            prop_assert!((td - (y - cur[a])).abs() < 1e-9);
        }
    }
}
