use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agents::Mlp;
use crate::envs::EpisodicEnv;
use crate::error::{invalid, Result};
use crate::mdp::{argmax_lowest, QFunction};

/// Default exponential smoothing of action-gap series.
pub const GAP_SMOOTHING: f64 = 0.99;

/// `(a − r)/|b − r|`.
pub fn normalized_score(a: f64, b: f64, r: f64) -> Result<f64> {
    let d = denominator(b, r)?;
    Ok((a - r) / d)
}

/// `(a − b)/|b − r|`.
pub fn normalized_improvement(a: f64, b: f64, r: f64) -> Result<f64> {
    let d = denominator(b, r)?;
    Ok((a - b) / d)
}

fn denominator(b: f64, r: f64) -> Result<f64> {
    let d = (b - r).abs();
    if !(d > 0.0) || !d.is_finite() {
        return invalid(format!("degenerate baseline: |b - r| = {d}"));
    }
    Ok(d)
}

/// Raw and normalized scores of one agent against a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub raw: f64,
    pub baseline: f64,
    pub random: f64,
    pub normalized_score: Option<f64>,
    pub normalized_improvement: Option<f64>,
    pub degenerate: bool,
}

impl ScoreRecord {
    pub fn new(raw: f64, baseline: f64, random: f64) -> Self {
        let score = normalized_score(raw, baseline, random).ok();
        let improvement = normalized_improvement(raw, baseline, random).ok();
        Self {
            raw,
            baseline,
            random,
            normalized_score: score,
            normalized_improvement: improvement,
            degenerate: score.is_none(),
        }
    }
}

/// Something that maps an observation (or its state) to action values.
pub trait ActionValues {
    fn action_values(&self, observation: &[f64], state: usize) -> Result<Vec<f64>>;
}

impl ActionValues for Mlp {
    fn action_values(&self, observation: &[f64], _state: usize) -> Result<Vec<f64>> {
        self.forward(observation)
    }
}

impl ActionValues for QFunction {
    fn action_values(&self, _observation: &[f64], state: usize) -> Result<Vec<f64>> {
        if state >= self.num_states() {
            return invalid(format!("state {state} outside the table"));
        }
        Ok(self.row(state).to_vec())
    }
}

/// Greedy rollouts recording the best-minus-second-best value at each
/// step. Series are truncated to the shortest trajectory, averaged, then
/// smoothed with `s_t = λ s_{t−1} + (1 − λ) x_t`.
pub fn empirical_action_gap<V: ActionValues>(
    values: &V,
    env: &mut EpisodicEnv,
    num_trajectories: usize,
    smoothing: f64,
) -> Result<Vec<f64>> {
    if env.num_actions() < 2 {
        return invalid("action gaps need at least two actions");
    }
    if num_trajectories == 0 {
        return invalid("at least one trajectory is needed");
    }
    if !(0.0..1.0).contains(&smoothing) {
        return invalid("smoothing must lie in [0, 1)");
    }
    let mut series: Vec<Vec<f64>> = Vec::with_capacity(num_trajectories);
    for _ in 0..num_trajectories {
        let mut obs = env.reset();
        let mut state = env.current_state();
        let mut gaps = Vec::new();
        loop {
            let q = values.action_values(&obs, state)?;
            let best = argmax_lowest(&q);
            let second = q
                .iter()
                .enumerate()
                .filter(|&(a, _)| a != best)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            gaps.push(q[best] - second);
            let step = env.step(best)?;
            if step.terminal || step.truncated {
                break;
            }
            obs = step.observation;
            state = step.state;
        }
        if gaps.is_empty() {
            return invalid("zero-length trajectory");
        }
        series.push(gaps);
    }
    let len = series.iter().map(Vec::len).min().expect("non-empty");
    let mut out = Vec::with_capacity(len);
    let mut smoothed = 0.0;
    for t in 0..len {
        let mean = series.iter().map(|s| s[t]).sum::<f64>() / series.len() as f64;
        smoothed = if t == 0 {
            mean
        } else {
            smoothing * smoothed + (1.0 - smoothing) * mean
        };
        out.push(smoothed);
    }
    Ok(out)
}

/// Monte-Carlo undiscounted return of the uniform policy.
pub fn random_policy_return(env: &EpisodicEnv, episodes: usize, seed: u64) -> Result<f64> {
    if episodes == 0 {
        return invalid("at least one episode is needed");
    }
    let mut env = env.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    env.seed(rng.gen());
    let na = env.num_actions();
    let mut total = 0.0;
    for _ in 0..episodes {
        env.reset();
        loop {
            let step = env.step(rng.gen_range(0..na))?;
            total += step.reward;
            if step.terminal || step.truncated {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}
