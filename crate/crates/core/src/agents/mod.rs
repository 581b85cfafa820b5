//! Deep agents on vector observations: an MLP approximator, Adam, a FIFO
//! replay buffer, the DQN-family regression targets and the training loop.

pub mod adam;
pub mod config;
pub mod mlp;
pub mod replay;
pub mod targets;
pub mod train;

pub use adam::Adam;
pub use config::{AgentConfig, Behavior, LossKind};
pub use mlp::Mlp;
pub use replay::ReplayBuffer;
pub use targets::{QuantileSample, TdBatch};
pub use train::{train, EpisodeRecord, EvalRecord, TrainOutcome};
