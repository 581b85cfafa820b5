//! Paired-seed ablation over DQN, Soft-DQN, AL and M-DQN.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{random_policy_return, ScoreRecord};
use crate::agents::train::write_episode_csv;
use crate::agents::{train, AgentConfig, LossKind};
use crate::envs::EnvSpec;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub envs: Vec<String>,
    pub seeds: Vec<u64>,
    pub agents: Vec<LossKind>,
    pub total_steps: usize,
    /// Episodes averaged for the final score of a cell.
    pub window: usize,
    pub random_episodes: usize,
    pub workers: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            envs: vec!["gridworld-5x5-slip0.1".into()],
            seeds: vec![0, 1, 2],
            agents: LossKind::ALL.to_vec(),
            total_steps: 200_000,
            window: 100,
            random_episodes: 10_000,
            workers: 1,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.envs.is_empty() || self.seeds.is_empty() || self.agents.is_empty() {
            return invalid("ablation needs at least one env, seed and agent");
        }
        if self.total_steps == 0 || self.window == 0 || self.random_episodes == 0 {
            return invalid("total_steps, window and random_episodes must be positive");
        }
        for e in &self.envs {
            EnvSpec::parse(e)?;
        }
        Ok(())
    }
}

/// Outcome of one (env, seed, agent) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub env: String,
    pub seed: u64,
    pub agent: LossKind,
    pub final_return: Option<f64>,
    pub curve: Option<PathBuf>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub cell: CellResult,
    pub random_return: f64,
    pub score: Option<ScoreRecord>,
}

pub const SUMMARY_CSV_HEADER: [&str; 10] = [
    "env",
    "seed",
    "agent",
    "status",
    "final_return",
    "dqn_return",
    "random_return",
    "normalized_score",
    "normalized_improvement",
    "degenerate",
];

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

pub fn curve_file_name(env: &str, agent: LossKind, seed: u64) -> String {
    format!("curve_{}_{}_seed{}.csv", sanitize(env), agent.name(), seed)
}

fn run_cell(
    env_name: &str,
    seed: u64,
    agent: LossKind,
    base: &AgentConfig,
    config: &AblationConfig,
    out_dir: &Path,
) -> Result<(f64, PathBuf)> {
    let env = EnvSpec::parse(env_name)?.episodic(base.gamma)?;
    let agent_config = AgentConfig {
        loss_kind: agent,
        seed,
        ..base.clone()
    };
    let outcome = train(&env, &agent_config, config.total_steps)?;
    let path = out_dir.join(curve_file_name(env_name, agent, seed));
    write_episode_csv(&outcome.episodes, BufWriter::new(File::create(&path)?))?;
    let score = outcome
        .final_mean_return(config.window)
        .ok_or_else(|| Error::Environment("no episode finished during training".into()))?;
    Ok((score, path))
}

/// Trains every agent on every (env, seed) pair. Cells sharing an
/// (env, seed) pair see identical environment randomness. A failing cell
/// is recorded and the others still run.
pub fn run_ablation(
    config: &AblationConfig,
    base: &AgentConfig,
    out_dir: &Path,
) -> Result<Vec<SummaryRow>> {
    config.validate()?;
    base.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut cells = Vec::new();
    for env in &config.envs {
        for &seed in &config.seeds {
            for &agent in &config.agents {
                cells.push((env.clone(), seed, agent));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|(env, seed, agent)| match run_cell(env, *seed, *agent, base, config, out_dir) {
                Ok((score, path)) => CellResult {
                    env: env.clone(),
                    seed: *seed,
                    agent: *agent,
                    final_return: Some(score),
                    curve: Some(path),
                    error: None,
                },
                Err(e) => CellResult {
                    env: env.clone(),
                    seed: *seed,
                    agent: *agent,
                    final_return: None,
                    curve: None,
                    error: Some(e.to_string()),
                },
            })
            .collect()
    });

    let mut random = Vec::new();
    for (i, env) in config.envs.iter().enumerate() {
        let e = EnvSpec::parse(env)?.episodic(base.gamma)?;
        random.push(random_policy_return(&e, config.random_episodes, base.seed.wrapping_add(i as u64))?);
    }
    let rows = results
        .iter()
        .map(|cell| {
            let env_index = config.envs.iter().position(|e| *e == cell.env).expect("known env");
            let r = random[env_index];
            let dqn = results
                .iter()
                .find(|c| c.env == cell.env && c.seed == cell.seed && c.agent == LossKind::Dqn)
                .and_then(|c| c.final_return);
            let score = match (cell.final_return, dqn) {
                (Some(a), Some(b)) => Some(ScoreRecord::new(a, b, r)),
                _ => None,
            };
            SummaryRow {
                cell: cell.clone(),
                random_return: r,
                score,
            }
        })
        .collect::<Vec<_>>();
    write_summary_csv(&rows, BufWriter::new(File::create(out_dir.join("summary.csv"))?))?;
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_CSV_HEADER)?;
    for row in rows {
        let c = &row.cell;
        let status = match &c.error {
            None => "ok".to_string(),
            Some(e) => format!("error: {e}"),
        };
        w.write_record([
            c.env.clone(),
            c.seed.to_string(),
            c.agent.name().to_string(),
            status,
            opt(c.final_return),
            opt(row.score.map(|s| s.baseline)),
            row.random_return.to_string(),
            opt(row.score.and_then(|s| s.normalized_score)),
            opt(row.score.and_then(|s| s.normalized_improvement)),
            row.score.map_or(String::new(), |s| s.degenerate.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (AblationConfig, AgentConfig) {
        let config = AblationConfig {
            envs: vec!["chain-5-slip0".into()],
            seeds: vec![7],
            total_steps: 1500,
            random_episodes: 200,
            workers: 2,
            ..AblationConfig::default()
        };
        let base = AgentConfig {
            hidden: vec![8],
            learning_starts: 200,
            epsilon_decay_steps: 500,
            target_update_period: 200,
            eval_period: 0,
            ..AgentConfig::default()
        };
        (config, base)
    }

    #[test]
    fn output_contract() {
        let dir = tempfile::tempdir().unwrap();
        let (config, base) = tiny();
        let rows = run_ablation(&config, &base, dir.path()).unwrap();
        assert_eq!(rows.len(), 4);
        let mut files: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        files.sort();
        assert_eq!(files.len(), 5);
        assert!(files.contains(&"summary.csv".to_string()));
        assert!(files.contains(&curve_file_name("chain-5-slip0", LossKind::MDqn, 7)));
        let dqn = rows.iter().find(|r| r.cell.agent == LossKind::Dqn).unwrap();
        assert_eq!(dqn.score.unwrap().normalized_improvement, Some(0.0));
        let mut reader = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
        let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, SUMMARY_CSV_HEADER);
        assert_eq!(reader.records().count(), 4);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let (mut config, base) = tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_ablation(&config, &base, a.path()).unwrap();
        config.workers = 1;
        run_ablation(&config, &base, b.path()).unwrap();
        let read = |d: &Path| std::fs::read(d.join("summary.csv")).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }

    #[test]
    fn failing_cell_is_recorded() {
        let (mut config, base) = tiny();
        // Too short for any episode to finish on a 1000-step cap.
        config.envs = vec!["gridworld-5x5-slip0.1".into()];
        config.total_steps = 1;
        config.agents = vec![LossKind::Dqn];
        let dir = tempfile::tempdir().unwrap();
        let rows = run_ablation(&config, &base, dir.path()).unwrap();
        assert!(rows[0].cell.error.is_some());
        assert!(rows[0].score.is_none());
    }
}
