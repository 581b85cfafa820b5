use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use munchausen::agents::train::{write_episode_csv, write_eval_csv};
use munchausen::agents::{train, AgentConfig, Behavior, LossKind, Mlp};
use munchausen::envs::EnvSpec;
use munchausen::experiments::config::RunConfig;
use munchausen::experiments::verify::{write_q_csv, write_verify_csv};
use munchausen::experiments::{empirical_action_gap, run_ablation, run_verification};
use munchausen::mdp::{greedy_policy, solve_q_star, soft_optimal_policy, solve_soft_q_star};
use munchausen::regularized::TemperatureParams;
use munchausen::schemes::{run_scheme, ErrorKind, ErrorModel, RunOptions, Scheme};
use munchausen::theory::write_bound_csv;
use munchausen::Result;

#[derive(Parser, Debug)]
#[command(name = "munchausen", version, about = "Munchausen value iteration and M-DQN experiments")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Concurrent ablation cells.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve an MDP exactly and write q* (or the soft optimum with --tau).
    Solve(SolveArgs),
    /// Run an abstract iteration scheme and write its trace.
    Mvi(MviArgs),
    /// Run the theory checks on seeded Garnet MDPs.
    Verify(VerifyArgs),
    /// Train one deep agent.
    Train(TrainArgs),
    /// Train DQN, Soft-DQN, AL and M-DQN on paired seeds.
    Ablate(AblateArgs),
    /// Empirical action gap of greedy rollouts.
    Gap(GapArgs),
}

#[derive(Args, Debug)]
struct SourceArgs {
    /// Environment name, e.g. garnet-15x4-b3 or gridworld-5x5-slip0.1.
    #[arg(long)]
    env: Option<String>,
    /// MDP in TOML form; overrides --env.
    #[arg(long)]
    mdp_file: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args, Debug)]
struct MviArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// mvi, mdvi, cvi, al, avi or soft_avi.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// none, gaussian, uniform or adversarial.
    #[arg(long)]
    error: Option<String>,
    #[arg(long)]
    error_scale: Option<f64>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Comma-separated subset of checks (default: all).
    #[arg(long, value_delimiter = ',')]
    checks: Vec<String>,
    #[arg(long)]
    num_mdps: Option<usize>,
}

#[derive(Args, Debug)]
struct AgentArgs {
    /// dqn, soft_dqn, m_dqn or al.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    l0: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Target update period.
    #[arg(long = "C")]
    target_update_period: Option<usize>,
    /// Interaction period.
    #[arg(long = "F")]
    interaction_period: Option<usize>,
    #[arg(long)]
    buffer_capacity: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epsilon_final: Option<f64>,
    #[arg(long)]
    epsilon_decay_steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    huber_kappa: Option<f64>,
    /// epsilon_greedy or stochastic_softmax.
    #[arg(long)]
    behavior: Option<String>,
    #[arg(long)]
    learning_starts: Option<usize>,
    /// Hidden layer sizes, comma-separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    eval_period: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
}

impl AgentArgs {
    fn apply(&self, c: &mut AgentConfig) -> Result<()> {
        if let Some(v) = &self.loss {
            c.loss_kind = LossKind::parse(v)?;
        }
        if let Some(v) = &self.behavior {
            c.behavior = Behavior::parse(v)?;
        }
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { c.$field = v; })*
            };
        }
        set!(
            tau,
            alpha,
            l0,
            gamma,
            target_update_period,
            interaction_period,
            buffer_capacity,
            batch_size,
            epsilon_final,
            epsilon_decay_steps,
            learning_rate,
            adam_beta1,
            adam_beta2,
            adam_eps,
            huber_kappa,
            learning_starts,
            hidden,
            eval_period,
            eval_episodes
        );
        c.validate()
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    agent: AgentArgs,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',')]
    envs: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    agents: Option<Vec<String>>,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    agent: AgentArgs,
}

#[derive(Args, Debug)]
struct GapArgs {
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Network weights; the exact q* of the environment is used otherwise.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    smoothing: Option<f64>,
}

enum Outcome {
    Done,
    VerificationFailed,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn apply_source(args: &SourceArgs, env: &mut String, file: &mut Option<PathBuf>, gamma: &mut f64) {
    if let Some(e) = &args.env {
        *env = e.clone();
    }
    if let Some(f) = &args.mdp_file {
        *file = Some(f.clone());
    }
    if let Some(g) = args.gamma {
        *gamma = g;
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    let seed = cfg.seed;
    let out = cli.out;
    std::fs::create_dir_all(&out)?;

    match cli.command {
        Command::Solve(args) => {
            let s = &mut cfg.solve;
            apply_source(&args.source, &mut s.env, &mut s.mdp_file, &mut s.gamma);
            if let Some(t) = args.tau {
                s.tau = t;
            }
            let mdp = s.source().resolve(seed)?;
            if s.tau > 0.0 {
                let q = solve_soft_q_star(&mdp, s.tau, s.tol)?;
                let (pi, _) = soft_optimal_policy(&q, s.tau)?;
                write_q_csv(&q, &pi, create(&out, "soft_q_star.csv")?)?;
            } else {
                let q = solve_q_star(&mdp, s.tol)?;
                write_q_csv(&q, &greedy_policy(&q), create(&out, "q_star.csv")?)?;
            }
        }
        Command::Mvi(args) => {
            let m = &mut cfg.mvi;
            apply_source(&args.source, &mut m.env, &mut m.mdp_file, &mut m.gamma);
            if let Some(v) = args.scheme {
                m.scheme = v;
            }
            if let Some(v) = args.alpha {
                m.alpha = v;
            }
            if let Some(v) = args.tau {
                m.tau = v;
            }
            if let Some(v) = args.iterations {
                m.iterations = v;
            }
            if let Some(v) = args.error {
                m.error = v;
            }
            if let Some(v) = args.error_scale {
                m.error_scale = v;
            }
            let mdp = m.source().resolve(seed)?;
            let scheme = Scheme::parse(&m.scheme)?;
            let params = TemperatureParams::new(m.tau, m.alpha, -1.0)?;
            let model = ErrorModel {
                kind: ErrorKind::parse(&m.error)?,
                scale: m.error_scale,
                seed,
                precomputed: None,
            };
            let trace = run_scheme(&mdp, scheme, &params, &model, &RunOptions::new(m.iterations).tracking())?;
            trace.write_csv(create(&out, "trace.csv")?)?;
            if trace.diverged {
                eprintln!("warning: iterates exceeded the divergence threshold; trace truncated");
            }
        }
        Command::Verify(args) => {
            if let Some(n) = args.num_mdps {
                cfg.verify.num_mdps = n;
            }
            let report = run_verification(&cfg.verify, seed, &args.checks)?;
            write_verify_csv(&report.rows, create(&out, "verify.csv")?)?;
            write_bound_csv(&report.bounds, create(&out, "bounds.csv")?)?;
            let failed: Vec<_> = report.rows.iter().filter(|r| !r.passed).collect();
            for r in &failed {
                eprintln!(
                    "FAIL {} mdp={} alpha={} {}: value {} vs {}",
                    r.check, r.mdp, r.alpha, r.variant, r.value, r.tolerance
                );
            }
            println!("{} checks, {} failed", report.rows.len(), failed.len());
            if !failed.is_empty() {
                return Ok(Outcome::VerificationFailed);
            }
        }
        Command::Train(args) => {
            if let Some(e) = args.env {
                cfg.train.env = e;
            }
            if let Some(s) = args.steps {
                cfg.train.total_steps = s;
            }
            cfg.agent.seed = seed;
            args.agent.apply(&mut cfg.agent)?;
            let env = EnvSpec::parse(&cfg.train.env)?.episodic(cfg.agent.gamma)?;
            let outcome = train(&env, &cfg.agent, cfg.train.total_steps)?;
            write_episode_csv(&outcome.episodes, create(&out, "episodes.csv")?)?;
            write_eval_csv(&outcome.evals, create(&out, "eval.csv")?)?;
            outcome.network.save(out.join("weights.bin"))?;
            if let Some(r) = outcome.final_mean_return(100) {
                println!("final mean return over the last 100 episodes: {r}");
            }
        }
        Command::Ablate(args) => {
            let a = &mut cfg.ablate;
            if let Some(v) = args.envs {
                a.envs = v;
            }
            if let Some(v) = args.seeds {
                a.seeds = v;
            }
            if let Some(v) = args.agents {
                a.agents = v.iter().map(|s| LossKind::parse(s)).collect::<Result<_>>()?;
            }
            if let Some(v) = args.steps {
                a.total_steps = v;
            }
            if cli.workers.is_some() || a.workers == 0 {
                a.workers = cfg.workers.max(1);
            }
            cfg.agent.seed = seed;
            args.agent.apply(&mut cfg.agent)?;
            let rows = run_ablation(&cfg.ablate, &cfg.agent, &out)?;
            let failed = rows.iter().filter(|r| r.cell.error.is_some()).count();
            println!("{} cells, {} failed", rows.len(), failed);
        }
        Command::Gap(args) => {
            let g = &mut cfg.gap;
            if let Some(v) = args.env {
                g.env = v;
            }
            if let Some(v) = args.gamma {
                g.gamma = v;
            }
            if let Some(v) = args.weights {
                g.weights = Some(v);
            }
            if let Some(v) = args.trajectories {
                g.trajectories = v;
            }
            if let Some(v) = args.smoothing {
                g.smoothing = v;
            }
            let mut env = EnvSpec::parse(&g.env)?.episodic(g.gamma)?;
            env.seed(seed);
            let series = match &g.weights {
                Some(path) => empirical_action_gap(&Mlp::load(path)?, &mut env, g.trajectories, g.smoothing)?,
                None => {
                    let q = solve_q_star(env.mdp(), cfg.solve.tol)?;
                    empirical_action_gap(&q, &mut env, g.trajectories, g.smoothing)?
                }
            };
            let mut w = csv::Writer::from_writer(create(&out, "gap.csv")?);
            w.write_record(["t", "gap"])?;
            for (t, v) in series.iter().enumerate() {
                w.write_record([t.to_string(), v.to_string()])?;
            }
            w.flush()?;
        }
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
