//! The DQN-family training loop: behavior policy over the online network,
//! FIFO replay, a gradient step every `F` environment steps and a target
//! copy every `C` steps.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::config::{AgentConfig, Behavior, LossKind};
use super::mlp::Mlp;
use super::replay::ReplayBuffer;
use super::targets::{compute_targets, TdBatch};
use crate::envs::EpisodicEnv;
use crate::error::{invalid, Error, Result};
use crate::mdp::argmax_lowest;
use crate::regularized::softmax_row;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_observation: Vec<f64>,
    /// Absorbing next state. Truncation by the episode cap is not terminal.
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// Environment steps taken when the episode ended.
    pub steps: usize,
    pub length: usize,
    /// Undiscounted return.
    pub episode_return: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub mean_return: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Mlp,
    pub episodes: Vec<EpisodeRecord>,
    pub evals: Vec<EvalRecord>,
    pub gradient_steps: usize,
}

impl TrainOutcome {
    /// Mean return of the last `window` finished episodes.
    pub fn final_mean_return(&self, window: usize) -> Option<f64> {
        if self.episodes.is_empty() || window == 0 {
            return None;
        }
        let tail = &self.episodes[self.episodes.len().saturating_sub(window)..];
        Some(tail.iter().map(|e| e.episode_return).sum::<f64>() / tail.len() as f64)
    }
}

/// Independent generators derived from one run seed.
struct Streams {
    exploration: ChaCha8Rng,
    sampling: ChaCha8Rng,
    init: ChaCha8Rng,
    eval: ChaCha8Rng,
    env_seed: u64,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        Self {
            env_seed: stream(0).gen(),
            exploration: stream(1),
            sampling: stream(2),
            init: stream(3),
            eval: stream(4),
        }
    }
}

fn select_action(
    net: &Mlp,
    obs: &[f64],
    config: &AgentConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let q = net.forward(obs)?;
    match config.behavior {
        Behavior::EpsilonGreedy => {
            if rng.gen::<f64>() < config.epsilon(step) {
                Ok(rng.gen_range(0..q.len()))
            } else {
                Ok(argmax_lowest(&q))
            }
        }
        Behavior::StochasticSoftmax => {
            let pi = softmax_row(&q, config.tau)?;
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (a, p) in pi.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(a);
                }
            }
            Ok(argmax_lowest(&q))
        }
    }
}

/// Mean undiscounted return of the greedy policy of `net`.
pub fn evaluate_greedy(net: &Mlp, env: &mut EpisodicEnv, episodes: usize) -> Result<f64> {
    if episodes == 0 {
        return invalid("evaluation needs at least one episode");
    }
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset();
        loop {
            let a = argmax_lowest(&net.forward(&obs)?);
            let step = env.step(a)?;
            total += step.reward;
            if step.terminal || step.truncated {
                break;
            }
            obs = step.observation;
        }
    }
    Ok(total / episodes as f64)
}

fn gradient_step(
    online: &mut Mlp,
    target: &Mlp,
    adam: &mut Adam,
    buffer: &ReplayBuffer<Transition>,
    config: &AgentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let idx = buffer.sample_indices(rng, config.batch_size)?;
    let samples: Vec<&Transition> = idx.iter().map(|&i| buffer.get(i).expect("sampled index")).collect();
    let na = online.output_dim();
    let needs_current = matches!(config.loss_kind, LossKind::MDqn | LossKind::Al);
    let mut batch = TdBatch {
        rewards: Vec::with_capacity(samples.len()),
        actions: Vec::with_capacity(samples.len()),
        terminals: Vec::with_capacity(samples.len()),
        target_q_current: Vec::with_capacity(samples.len()),
        target_q_next: Vec::with_capacity(samples.len()),
    };
    for t in &samples {
        batch.rewards.push(t.reward);
        batch.actions.push(t.action);
        batch.terminals.push(t.terminal);
        batch.target_q_current.push(if needs_current {
            target.forward(&t.observation)?
        } else {
            vec![0.0; na]
        });
        batch.target_q_next.push(if t.terminal {
            vec![0.0; na]
        } else {
            target.forward(&t.next_observation)?
        });
    }
    let targets = compute_targets(
        config.loss_kind,
        &batch,
        config.gamma,
        config.tau,
        config.alpha,
        config.l0,
    )?;
    let obs: Vec<&[f64]> = samples.iter().map(|t| t.observation.as_slice()).collect();
    let (_, grads) = online.td_loss_and_grad(&obs, &batch.actions, &targets, config.huber_kappa)?;
    adam.step(online.params_mut(), &grads, config.learning_rate)?;
    online.check_finite()
}

/// Trains an agent for `total_steps` environment steps. Everything random
/// is derived from `config.seed`, so equal seeds give equal runs.
pub fn train(env: &EpisodicEnv, config: &AgentConfig, total_steps: usize) -> Result<TrainOutcome> {
    config.validate()?;
    if total_steps == 0 {
        return invalid("total_steps must be at least 1");
    }
    let mut streams = Streams::new(config.seed);
    let mut env = env.clone();
    env.seed(streams.env_seed);
    let mut eval_env = env.clone();
    eval_env.seed(streams.eval.gen());

    let mut sizes = vec![env.observation_dim()];
    sizes.extend(&config.hidden);
    sizes.push(env.num_actions());
    let mut online = Mlp::init(&sizes, &mut streams.init)?;
    let mut target = online.clone();
    let mut adam = Adam::new(online.num_params(), config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;

    let mut episodes = Vec::new();
    let mut evals = Vec::new();
    let mut gradient_steps = 0;
    let mut obs = env.reset();
    let mut episode_return = 0.0;
    let mut episode_length = 0;

    for t in 1..=total_steps {
        let action = select_action(&online, &obs, config, t - 1, &mut streams.exploration)?;
        let step = env
            .step(action)
            .map_err(|e| Error::Environment(format!("step {t}, episode {}: {e}", episodes.len())))?;
        episode_return += step.reward;
        episode_length += 1;
        buffer.push(Transition {
            observation: std::mem::take(&mut obs),
            action,
            reward: step.reward,
            next_observation: step.observation.clone(),
            terminal: step.terminal,
        });
        if step.terminal || step.truncated {
            episodes.push(EpisodeRecord {
                episode: episodes.len(),
                steps: t,
                length: episode_length,
                episode_return,
            });
            episode_return = 0.0;
            episode_length = 0;
            obs = env.reset();
        } else {
            obs = step.observation;
        }

        if t >= config.learning_starts && t % config.interaction_period == 0 {
            gradient_step(&mut online, &target, &mut adam, &buffer, config, &mut streams.sampling)?;
            gradient_steps += 1;
        }
        if t % config.target_update_period == 0 {
            target = online.clone();
        }
        if config.eval_period > 0 && t % config.eval_period == 0 {
            evals.push(EvalRecord {
                step: t,
                mean_return: evaluate_greedy(&online, &mut eval_env, config.eval_episodes.max(1))?,
                episodes: config.eval_episodes.max(1),
            });
        }
    }
    Ok(TrainOutcome {
        network: online,
        episodes,
        evals,
        gradient_steps,
    })
}

pub const EPISODE_CSV_HEADER: [&str; 4] = ["episode", "steps", "length", "return"];
pub const EVAL_CSV_HEADER: [&str; 3] = ["step", "mean_return", "episodes"];

pub fn write_episode_csv<W: Write>(episodes: &[EpisodeRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EPISODE_CSV_HEADER)?;
    for e in episodes {
        w.write_record([
            e.episode.to_string(),
            e.steps.to_string(),
            e.length.to_string(),
            e.episode_return.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_eval_csv<W: Write>(evals: &[EvalRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVAL_CSV_HEADER)?;
    for e in evals {
        w.write_record([e.step.to_string(), e.mean_return.to_string(), e.episodes.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
