//! Temperature-aware log-sum-exp, softmax, entropy and KL primitives.
//!
//! `τ = 0` is never treated as a numerical limit here: every softmax-type
//! routine rejects it, and callers switch to the hard-max paths in
//! [`crate::mdp`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mdp::{QFunction, StochasticPolicy};

/// Probabilities below this are treated as exact zeros in KL/entropy.
pub const PROB_FLOOR: f64 = 1e-300;

/// Entropy temperature `tau`, Munchausen scaling `alpha`, and the
/// log-policy clipping floor `l0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureParams {
    pub tau: f64,
    pub alpha: f64,
    pub l0: f64,
}

impl Default for TemperatureParams {
    fn default() -> Self {
        Self {
            tau: 0.03,
            alpha: 0.9,
            l0: -1.0,
        }
    }
}

impl TemperatureParams {
    pub fn new(tau: f64, alpha: f64, l0: f64) -> Result<Self> {
        let p = Self { tau, alpha, l0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) {
            return invalid(format!("tau must be >= 0, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid(format!("alpha must lie in [0,1], got {}", self.alpha));
        }
        if !(self.l0 <= 0.0) {
            return invalid(format!("l0 must be <= 0, got {}", self.l0));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return invalid(format!("temperature must be positive and finite, got {tau}"));
    }
    Ok(())
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `τ ln Σ_a exp(q(a)/τ)`, with the maximum factored out.
pub fn stable_lse(row: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if row.is_empty() {
        return invalid("log-sum-exp of an empty row");
    }
    let m = row_max(row);
    let sum: f64 = row.iter().map(|q| ((q - m) / tau).exp()).sum();
    Ok(m + tau * sum.ln())
}

/// `τ ln softmax(q/τ)` for one row, computed as
/// `q − v − τ ln⟨1, exp((q − v)/τ)⟩` with `v = max q`.
pub fn log_softmax_row(row: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if row.is_empty() {
        return invalid("log-softmax of an empty row");
    }
    let v = row_max(row);
    let sum: f64 = row.iter().map(|q| ((q - v) / tau).exp()).sum();
    let log_norm = tau * sum.ln();
    Ok(row.iter().map(|q| ((q - v) - log_norm).min(0.0)).collect())
}

/// `softmax(q/τ)` for one row.
pub fn softmax_row(row: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if row.is_empty() {
        return invalid("softmax of an empty row");
    }
    let m = row_max(row);
    let mut out: Vec<f64> = row.iter().map(|q| ((q - m) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// Row-wise `softmax(q/τ)`.
pub fn softmax_policy(q: &QFunction, tau: f64) -> Result<StochasticPolicy> {
    check_tau(tau)?;
    let mut probs = Vec::with_capacity(q.values().len());
    for row in q.rows() {
        probs.extend(softmax_row(row, tau)?);
    }
    Ok(StochasticPolicy::from_probs_unchecked(
        q.num_states(),
        q.num_actions(),
        probs,
    ))
}

/// Row-wise `τ ln π` for `π = softmax(q/τ)`. Every entry is `≤ 0`.
pub fn log_softmax_policy(q: &QFunction, tau: f64) -> Result<QFunction> {
    check_tau(tau)?;
    let mut values = Vec::with_capacity(q.values().len());
    for row in q.rows() {
        values.extend(log_softmax_row(row, tau)?);
    }
    QFunction::from_vec(q.num_states(), q.num_actions(), values)
}

/// Clips a scaled log-policy into `[l0, 0]`.
pub fn clip_log_policy(x: f64, l0: f64) -> f64 {
    x.max(l0).min(0.0)
}

/// Per-state Shannon entropy `−⟨π, ln π⟩`, using `0 ln 0 = 0`.
pub fn entropy(policy: &StochasticPolicy) -> Vec<f64> {
    policy
        .rows()
        .map(|row| {
            let h: f64 = row
                .iter()
                .filter(|&&p| p > PROB_FLOOR)
                .map(|&p| -p * p.ln())
                .sum();
            h.max(0.0)
        })
        .collect()
}

/// Per-state `KL(p1 || p2)`. A state where `p1` puts mass on an action
/// that `p2` excludes yields `+inf`.
pub fn kl(p1: &StochasticPolicy, p2: &StochasticPolicy) -> Vec<f64> {
    p1.rows()
        .zip(p2.rows())
        .map(|(a, b)| {
            let mut total = 0.0;
            for (&x, &y) in a.iter().zip(b) {
                if x <= PROB_FLOOR {
                    continue;
                }
                if y <= PROB_FLOOR {
                    return f64::INFINITY;
                }
                total += x * (x.ln() - y.ln());
            }
            total.max(0.0)
        })
        .collect()
}
