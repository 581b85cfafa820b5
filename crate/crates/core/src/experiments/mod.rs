//! Run configuration, score and action-gap metrics, the ablation runner
//! and the verification protocol behind the command-line tool.

pub mod ablation;
pub mod config;
pub mod metrics;
pub mod verify;

pub use ablation::{run_ablation, AblationConfig};
pub use config::RunConfig;
pub use metrics::{empirical_action_gap, normalized_improvement, normalized_score, random_policy_return, ScoreRecord};
pub use verify::{run_verification, VerifyReport};
