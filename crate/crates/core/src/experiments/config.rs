//! TOML run configuration. Each subcommand reads its own section; agent
//! hyperparameters live in `[agent]` under their usual names.
//!
//! ```toml
//! seed = 0
//! workers = 4
//!
//! [agent]
//! loss_kind = "m_dqn"
//! tau = 0.03
//! alpha = 0.9
//! C = 1000
//! F = 4
//!
//! [ablate]
//! envs = ["gridworld-5x5-slip0.1"]
//! seeds = [0, 1, 2]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ablation::AblationConfig;
use crate::agents::AgentConfig;
use crate::envs::EnvSpec;
use crate::error::{invalid, Error, Result};
use crate::mdp::{FiniteMdp, DEFAULT_TOL};

/// Where an MDP comes from: a named environment or a TOML file.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpSource {
    pub env: String,
    pub mdp_file: Option<PathBuf>,
    pub gamma: f64,
}

impl Default for MdpSource {
    fn default() -> Self {
        Self {
            env: "garnet-15x4-b3".into(),
            mdp_file: None,
            gamma: 0.99,
        }
    }
}

impl MdpSource {
    /// Loads the MDP. The seed only matters for generated (Garnet) MDPs.
    /// A file's own discount is replaced by `gamma`.
    pub fn resolve(&self, seed: u64) -> Result<FiniteMdp> {
        match &self.mdp_file {
            Some(path) => FiniteMdp::load(path)?.with_gamma(self.gamma),
            None => EnvSpec::parse(&self.env)?.mdp(self.gamma, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub env: String,
    pub mdp_file: Option<PathBuf>,
    pub gamma: f64,
    /// Entropy temperature; 0 solves the unregularized MDP.
    pub tau: f64,
    pub tol: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            env: MdpSource::default().env,
            mdp_file: None,
            gamma: 0.99,
            tau: 0.0,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MviConfig {
    pub env: String,
    pub mdp_file: Option<PathBuf>,
    pub gamma: f64,
    pub scheme: String,
    pub alpha: f64,
    pub tau: f64,
    pub iterations: usize,
    /// `none`, `gaussian`, `uniform` or `adversarial`.
    pub error: String,
    pub error_scale: f64,
}

impl SolveConfig {
    pub fn source(&self) -> MdpSource {
        MdpSource {
            env: self.env.clone(),
            mdp_file: self.mdp_file.clone(),
            gamma: self.gamma,
        }
    }
}

impl MviConfig {
    pub fn source(&self) -> MdpSource {
        MdpSource {
            env: self.env.clone(),
            mdp_file: self.mdp_file.clone(),
            gamma: self.gamma,
        }
    }
}

impl Default for MviConfig {
    fn default() -> Self {
        Self {
            env: MdpSource::default().env,
            mdp_file: None,
            gamma: 0.99,
            scheme: "mvi".into(),
            alpha: 0.9,
            tau: 0.03,
            iterations: 100,
            error: "none".into(),
            error_scale: 0.0,
        }
    }
}

/// Protocol of the `verify` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub num_mdps: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub branching: usize,
    pub gamma: f64,
    pub tau: f64,
    pub alphas: Vec<f64>,
    pub iterations: usize,
    pub noise_scale: f64,
    pub al_taus: Vec<f64>,
    pub al_steps: usize,
    pub gap_alphas: Vec<f64>,
    pub gap_iterations: usize,
    pub gap_gamma: f64,
    pub gap_tolerance: f64,
    pub bound_mdps: usize,
    pub bound_seeds: usize,
    pub bound_iterations: usize,
    pub bound_alpha: f64,
    pub compensation_runs: usize,
    pub compensation_iterations: usize,
    pub compensation_noise: f64,
    pub compensation_gamma: f64,
    pub tol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            num_mdps: 10,
            num_states: 15,
            num_actions: 4,
            branching: 3,
            gamma: 0.99,
            tau: 0.03,
            alphas: vec![0.5, 0.9, 1.0],
            iterations: 50,
            noise_scale: 0.1,
            al_taus: vec![1e-2, 1e-4, 1e-6],
            al_steps: 20,
            gap_alphas: vec![0.0, 0.5, 0.9, 1.0],
            gap_iterations: 500,
            gap_gamma: 0.9,
            gap_tolerance: 0.01,
            bound_mdps: 3,
            bound_seeds: 3,
            bound_iterations: 100,
            bound_alpha: 0.9,
            compensation_runs: 30,
            compensation_iterations: 300,
            compensation_noise: 1.0,
            compensation_gamma: 0.99,
            tol: DEFAULT_TOL,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_mdps == 0 || self.iterations == 0 || self.alphas.is_empty() {
            return invalid("verify needs at least one MDP, iteration and alpha");
        }
        if self.al_taus.len() < 2 {
            return invalid("the AL limit check needs at least two temperatures");
        }
        if self.gap_iterations < 200 && self.gap_alphas.contains(&1.0) {
            return invalid("the alpha = 1 gap check reads iteration 200");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub env: String,
    pub total_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: "gridworld-5x5-slip0.1".into(),
            total_steps: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapConfig {
    pub env: String,
    pub gamma: f64,
    /// Network weights; without them the exact `q*` of the twin is used.
    pub weights: Option<PathBuf>,
    pub trajectories: usize,
    pub smoothing: f64,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            env: "gridworld-5x5-slip0.1".into(),
            gamma: 0.99,
            weights: None,
            trajectories: 10,
            smoothing: super::metrics::GAP_SMOOTHING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub agent: AgentConfig,
    pub solve: SolveConfig,
    pub mvi: MviConfig,
    pub verify: VerifyConfig,
    pub train: TrainConfig,
    pub ablate: AblationConfig,
    pub gap: GapConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}
