//! Munchausen value iteration and Munchausen-DQN on exactly solvable
//! finite MDPs.
//!
//! - [`mdp`]: tabular MDPs, Bellman operators and exact solvers.
//! - [`regularized`]: stable log-sum-exp, softmax, entropy and KL.
//! - [`schemes`]: abstract iteration schemes with error injection.
//! - [`theory`]: equivalence, action-gap and error-propagation checks.
//! - [`agents`]: deep agents (DQN, Soft-DQN, M-DQN, AL) with an MLP.
//! - [`envs`]: Garnet MDPs, gridworld and chain environments.
//! - [`experiments`]: metrics, ablations and CSV emission.

pub mod agents;
pub mod envs;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod mdp;
pub mod regularized;
pub mod schemes;
pub mod theory;

pub use error::{Error, Result};
