use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Regression target used by an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dqn,
    SoftDqn,
    MDqn,
    Al,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Dqn, LossKind::SoftDqn, LossKind::Al, LossKind::MDqn];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dqn => "dqn",
            LossKind::SoftDqn => "soft_dqn",
            LossKind::MDqn => "m_dqn",
            LossKind::Al => "al",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "dqn" => Ok(LossKind::Dqn),
            "soft_dqn" | "softdqn" => Ok(LossKind::SoftDqn),
            "m_dqn" | "mdqn" => Ok(LossKind::MDqn),
            "al" => Ok(LossKind::Al),
            other => invalid(format!("unknown loss kind '{other}'")),
        }
    }
}

/// Behavior policy used to collect transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    EpsilonGreedy,
    StochasticSoftmax,
}

impl Behavior {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "epsilon_greedy" => Ok(Behavior::EpsilonGreedy),
            "stochastic_softmax" | "softmax" => Ok(Behavior::StochasticSoftmax),
            other => invalid(format!("unknown behavior '{other}'")),
        }
    }
}

/// Hyperparameters of one training run. Field names follow the usual
/// M-DQN parameter table (`C`, `F`, `tau`, `alpha`, `l0`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub loss_kind: LossKind,
    pub tau: f64,
    pub alpha: f64,
    pub l0: f64,
    pub gamma: f64,
    /// Target network update period, in environment steps.
    #[serde(rename = "C")]
    pub target_update_period: usize,
    /// Interaction period: one gradient step every `F` environment steps.
    #[serde(rename = "F")]
    pub interaction_period: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub epsilon_final: f64,
    pub epsilon_decay_steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub huber_kappa: f64,
    pub behavior: Behavior,
    pub seed: u64,
    /// No gradient step is taken before this many environment steps.
    pub learning_starts: usize,
    pub hidden: Vec<usize>,
    /// Greedy evaluation every this many steps (0 disables it).
    pub eval_period: usize,
    pub eval_episodes: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::MDqn,
            tau: 0.03,
            alpha: 0.9,
            l0: -1.0,
            gamma: 0.99,
            target_update_period: 1000,
            interaction_period: 4,
            buffer_capacity: 50_000,
            batch_size: 32,
            epsilon_final: 0.01,
            epsilon_decay_steps: 25_000,
            learning_rate: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            huber_kappa: 1.0,
            behavior: Behavior::EpsilonGreedy,
            seed: 0,
            learning_starts: 1000,
            hidden: vec![64, 64],
            eval_period: 10_000,
            eval_episodes: 10,
        }
    }
}

impl AgentConfig {
    pub fn new(loss_kind: LossKind) -> Self {
        Self {
            loss_kind,
            ..Self::default()
        }
    }

    /// Full-scale values (replay capacity 10^6, C = 8000, decay 2.5·10^5,
    /// learning starts after 20k steps).
    pub fn paper(loss_kind: LossKind) -> Self {
        Self {
            loss_kind,
            target_update_period: 8000,
            buffer_capacity: 1_000_000,
            epsilon_decay_steps: 250_000,
            learning_starts: 20_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_update_period == 0
            || self.interaction_period == 0
            || self.buffer_capacity == 0
            || self.batch_size == 0
        {
            return invalid("C, F, buffer_capacity and batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.epsilon_final) {
            return invalid("epsilon_final must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) || !(self.huber_kappa > 0.0) {
            return invalid("learning_rate, adam_eps and huber_kappa must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return invalid("Adam betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return invalid("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid("alpha must lie in [0, 1]");
        }
        if !(self.l0 <= 0.0) {
            return invalid("l0 must be non-positive");
        }
        let needs_tau = matches!(self.loss_kind, LossKind::SoftDqn | LossKind::MDqn)
            || self.behavior == Behavior::StochasticSoftmax;
        if needs_tau && !(self.tau > 0.0) {
            return invalid("tau must be positive for soft losses and softmax behavior");
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return invalid("hidden layer sizes must be positive");
        }
        Ok(())
    }

    /// `ε` after `step` environment steps: linear from 1 to `epsilon_final`.
    pub fn epsilon(&self, step: usize) -> f64 {
        if self.epsilon_decay_steps == 0 {
            return self.epsilon_final;
        }
        if step >= self.epsilon_decay_steps {
            return self.epsilon_final;
        }
        let frac = step as f64 / self.epsilon_decay_steps as f64;
        1.0 - (1.0 - self.epsilon_final) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for kind in LossKind::ALL {
            AgentConfig::new(kind).validate().unwrap();
            AgentConfig::paper(kind).validate().unwrap();
        }
        let p = AgentConfig::paper(LossKind::MDqn);
        assert_eq!(p.target_update_period, 8000);
        assert_eq!(p.epsilon_decay_steps, 250_000);
        assert_eq!((p.tau, p.alpha, p.l0, p.learning_rate), (0.03, 0.9, -1.0, 5e-4));
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = AgentConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = AgentConfig::default();
        c.epsilon_final = 1.5;
        assert!(c.validate().is_err());
        let mut c = AgentConfig::default();
        c.tau = 0.0;
        assert!(c.validate().is_err());
        let mut c = AgentConfig::new(LossKind::Dqn);
        c.tau = 0.0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn epsilon_schedule() {
        let c = AgentConfig::default();
        assert_eq!(c.epsilon(0), 1.0);
        assert!((c.epsilon(12_500) - 0.505).abs() < 1e-12);
        assert_eq!(c.epsilon(25_000), 0.01);
        assert_eq!(c.epsilon(1_000_000), 0.01);
    }

    #[test]
    fn toml_keys() {
        let c: AgentConfig = toml::from_str("loss_kind = \"al\"\nC = 8000\nF = 2\n").unwrap();
        assert_eq!(c.loss_kind, LossKind::Al);
        assert_eq!(c.target_update_period, 8000);
        assert_eq!(c.interaction_period, 2);
        assert!(toml::from_str::<AgentConfig>("bogus = 1").is_err());
        assert_eq!(LossKind::parse("m-dqn").unwrap(), LossKind::MDqn);
    }
}
