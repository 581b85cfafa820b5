//! Exactly solvable environments: Garnet random MDPs, a slippery
//! gridworld and a two-ended chain. Every episodic environment carries its
//! tabular twin, and transitions are sampled from that twin's kernel.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mdp::{FiniteMdp, StochasticPolicy};

/// Default cap on episode length.
pub const DEFAULT_EPISODE_CAP: usize = 1000;

/// Parameters of a Garnet MDP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarnetSpec {
    pub num_states: usize,
    pub num_actions: usize,
    /// Successors per `(s,a)`.
    pub branching: usize,
    /// Fraction of `(s,a)` pairs carrying a non-zero reward.
    pub reward_density: f64,
    pub seed: u64,
}

impl GarnetSpec {
    pub fn new(num_states: usize, num_actions: usize, branching: usize, seed: u64) -> Self {
        Self {
            num_states,
            num_actions,
            branching,
            reward_density: 0.5,
            seed,
        }
    }
}

/// Random MDP: each `(s,a)` moves to `b` distinct uniformly drawn
/// successors with flat-Dirichlet probabilities; a `reward_density`
/// fraction of pairs get a standard-normal reward.
pub fn make_garnet(spec: &GarnetSpec, gamma: f64) -> Result<FiniteMdp> {
    let (ns, na, b) = (spec.num_states, spec.num_actions, spec.branching);
    if ns == 0 || na == 0 {
        return invalid("Garnet needs at least one state and one action");
    }
    if b == 0 || b > ns {
        return invalid(format!("branching factor {b} must lie in 1..={ns}"));
    }
    if !(0.0..=1.0).contains(&spec.reward_density) {
        return invalid("reward density must lie in [0,1]");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut transition = vec![0.0; ns * na * ns];
    for row in transition.chunks_mut(ns) {
        let successors = sample(&mut rng, ns, b);
        let weights: Vec<f64> = (0..b).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        let total: f64 = weights.iter().sum();
        for (next, w) in successors.iter().zip(&weights) {
            row[next] = w / total;
        }
    }
    let reward = (0..ns * na)
        .map(|_| {
            let active = rng.gen::<f64>() < spec.reward_density;
            let value: f64 = StandardNormal.sample(&mut rng);
            if active {
                value
            } else {
                0.0
            }
        })
        .collect();
    FiniteMdp::new(ns, na, transition, reward, gamma)
}

/// How states are presented to agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationEncoding {
    StateIndex,
    OneHot,
    Coordinates,
}

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub state: usize,
    pub reward: f64,
    /// Reached an absorbing state; bootstrapping must stop.
    pub terminal: bool,
    /// Hit the episode cap; the state is not terminal.
    pub truncated: bool,
}

/// Episodic environment driven by its tabular twin.
#[derive(Debug, Clone)]
pub struct EpisodicEnv {
    name: String,
    mdp: FiniteMdp,
    terminal: Vec<bool>,
    start_state: usize,
    encoding: ObservationEncoding,
    coordinates: Vec<Vec<f64>>,
    episode_cap: usize,
    rng: ChaCha8Rng,
    state: usize,
    steps: usize,
    done: bool,
}

impl EpisodicEnv {
    fn new(
        name: String,
        mdp: FiniteMdp,
        terminal: Vec<bool>,
        start_state: usize,
        coordinates: Vec<Vec<f64>>,
    ) -> Self {
        Self {
            name,
            mdp,
            terminal,
            start_state,
            encoding: ObservationEncoding::OneHot,
            coordinates,
            episode_cap: DEFAULT_EPISODE_CAP,
            rng: ChaCha8Rng::seed_from_u64(0),
            state: start_state,
            steps: 0,
            done: true,
        }
    }

    pub fn with_encoding(mut self, encoding: ObservationEncoding) -> Self {
        self.encoding = encoding;
        self
    }

    pub fn with_episode_cap(mut self, cap: usize) -> Self {
        self.episode_cap = cap.max(1);
        self
    }

    /// Reseeds the dynamics stream.
    pub fn seed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Tabular twin.
    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }

    pub fn terminal_states(&self) -> &[bool] {
        &self.terminal
    }

    pub fn start_state(&self) -> usize {
        self.start_state
    }

    pub fn num_actions(&self) -> usize {
        self.mdp.num_actions()
    }

    pub fn current_state(&self) -> usize {
        self.state
    }

    pub fn episode_cap(&self) -> usize {
        self.episode_cap
    }

    pub fn observation_dim(&self) -> usize {
        match self.encoding {
            ObservationEncoding::StateIndex => 1,
            ObservationEncoding::OneHot => self.mdp.num_states(),
            ObservationEncoding::Coordinates => self.coordinates[0].len(),
        }
    }

    pub fn encode(&self, state: usize) -> Vec<f64> {
        match self.encoding {
            ObservationEncoding::StateIndex => vec![state as f64],
            ObservationEncoding::OneHot => {
                let mut v = vec![0.0; self.mdp.num_states()];
                v[state] = 1.0;
                v
            }
            ObservationEncoding::Coordinates => self.coordinates[state].clone(),
        }
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.state = self.start_state;
        self.steps = 0;
        self.done = false;
        self.encode(self.state)
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::Environment(format!(
                "{}: step called on a finished episode without reset",
                self.name
            )));
        }
        if action >= self.mdp.num_actions() {
            return Err(Error::Environment(format!(
                "{}: action {action} out of range",
                self.name
            )));
        }
        let reward = self.mdp.reward(self.state, action);
        let row = self.mdp.transition_row(self.state, action);
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        let mut next = row.len() - 1;
        for (i, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = i;
                break;
            }
        }
        // Guard against rounding leaving `next` on a zero-probability state.
        while row[next] == 0.0 && next > 0 {
            next -= 1;
        }
        self.state = next;
        self.steps += 1;
        let terminal = self.terminal[next];
        let truncated = !terminal && self.steps >= self.episode_cap;
        self.done = terminal || truncated;
        Ok(StepResult {
            observation: self.encode(next),
            state: next,
            reward,
            terminal,
            truncated,
        })
    }

    /// Expected return of `policy` from the start state, discounted by
    /// `discount` (which may be 1 for policies that terminate surely).
    pub fn policy_return(&self, policy: &StochasticPolicy, discount: f64) -> Result<f64> {
        Ok(self.policy_state_values(policy, discount)?[self.start_state])
    }

    /// Exact `v_π(s)` on the twin, with terminal states fixed at 0.
    pub fn policy_state_values(&self, policy: &StochasticPolicy, discount: f64) -> Result<Vec<f64>> {
        self.mdp.check_policy(policy)?;
        let n = self.mdp.num_states();
        let kernel = self.mdp.state_kernel(policy);
        let mut m = DMatrix::<f64>::identity(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for s in 0..n {
            if self.terminal[s] {
                continue;
            }
            for t in 0..n {
                if !self.terminal[t] {
                    m[(s, t)] -= discount * kernel[s * n + t];
                }
            }
            b[s] = (0..self.mdp.num_actions())
                .map(|a| policy.prob(s, a) * self.mdp.reward(s, a))
                .sum();
        }
        let v = m.lu().solve(&b).ok_or(Error::Singular)?;
        Ok(v.iter().copied().collect())
    }
}

const MOVES: [(i64, i64); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

/// Parameters of the slippery gridworld.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub step_reward: f64,
    pub goal_reward: f64,
    pub slip: f64,
}

impl GridworldSpec {
    /// Start in `(0,0)`, goal in the opposite corner, step reward −0.1,
    /// goal reward 10.
    pub fn new(width: usize, height: usize, slip: f64) -> Self {
        Self {
            width,
            height,
            start: (0, 0),
            goal: (width.saturating_sub(1), height.saturating_sub(1)),
            step_reward: -0.1,
            goal_reward: 10.0,
            slip,
        }
    }
}

/// Four-action gridworld (up, right, down, left). With probability `slip`
/// a uniformly random other action is executed; moves into walls stay put.
/// Any action taken on the goal cell pays `goal_reward` and enters an
/// absorbing terminal state (index `width·height`); every other action pays
/// `step_reward`.
pub fn make_gridworld(spec: &GridworldSpec, gamma: f64) -> Result<EpisodicEnv> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 || w * h < 2 {
        return invalid("gridworld needs at least two cells");
    }
    if spec.goal.0 >= w || spec.goal.1 >= h || spec.start.0 >= w || spec.start.1 >= h {
        return invalid("start and goal must lie inside the grid");
    }
    if !(0.0..1.0).contains(&spec.slip) {
        return invalid("slip must lie in [0,1)");
    }
    let cells = w * h;
    let ns = cells + 1;
    let terminal_state = cells;
    let idx = |x: usize, y: usize| y * w + x;
    let goal = idx(spec.goal.0, spec.goal.1);
    let mut transition = vec![0.0; ns * 4 * ns];
    let mut reward = vec![0.0; ns * 4];
    for y in 0..h {
        for x in 0..w {
            let s = idx(x, y);
            for a in 0..4 {
                let row = &mut transition[(s * 4 + a) * ns..(s * 4 + a + 1) * ns];
                if s == goal {
                    row[terminal_state] = 1.0;
                    reward[s * 4 + a] = spec.goal_reward;
                    continue;
                }
                reward[s * 4 + a] = spec.step_reward;
                for (executed, (dx, dy)) in MOVES.iter().enumerate() {
                    let p = if executed == a { 1.0 - spec.slip } else { spec.slip / 3.0 };
                    if p == 0.0 {
                        continue;
                    }
                    let nx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let ny = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    row[idx(nx, ny)] += p;
                }
            }
        }
    }
    for a in 0..4 {
        transition[(terminal_state * 4 + a) * ns + terminal_state] = 1.0;
    }
    let mdp = FiniteMdp::new(ns, 4, transition, reward, gamma)?;
    let mut terminal = vec![false; ns];
    terminal[terminal_state] = true;
    let sx = (w.max(2) - 1) as f64;
    let sy = (h.max(2) - 1) as f64;
    let mut coordinates: Vec<Vec<f64>> = (0..cells)
        .map(|s| vec![(s % w) as f64 / sx, (s / w) as f64 / sy])
        .collect();
    coordinates.push(vec![-1.0, -1.0]);
    let name = format!("gridworld-{w}x{h}-slip{}", spec.slip);
    Ok(EpisodicEnv::new(
        name,
        mdp,
        terminal,
        idx(spec.start.0, spec.start.1),
        coordinates,
    ))
}

/// Parameters of the two-ended chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub length: usize,
    pub left_reward: f64,
    pub right_reward: f64,
    pub slip: f64,
}

impl ChainSpec {
    pub fn new(length: usize, slip: f64) -> Self {
        Self {
            length,
            left_reward: 0.1,
            right_reward: 1.0,
            slip,
        }
    }
}

/// Chain of `n` cells with actions left (0) and right (1), started in the
/// middle cell `n/2`. With probability `slip` the opposite move happens.
/// Any action on an end cell pays that end's reward and enters the absorbing
/// terminal state (index `n`); interior moves pay nothing.
pub fn make_chain(spec: &ChainSpec, gamma: f64) -> Result<EpisodicEnv> {
    let n = spec.length;
    if n < 3 {
        return invalid("chain needs at least 3 cells");
    }
    if !(0.0..1.0).contains(&spec.slip) {
        return invalid("slip must lie in [0,1)");
    }
    let ns = n + 1;
    let terminal_state = n;
    let mut transition = vec![0.0; ns * 2 * ns];
    let mut reward = vec![0.0; ns * 2];
    for s in 0..n {
        for a in 0..2 {
            let row = &mut transition[(s * 2 + a) * ns..(s * 2 + a + 1) * ns];
            if s == 0 || s == n - 1 {
                row[terminal_state] = 1.0;
                reward[s * 2 + a] = if s == 0 { spec.left_reward } else { spec.right_reward };
                continue;
            }
            let (intended, other) = if a == 0 { (s - 1, s + 1) } else { (s + 1, s - 1) };
            row[intended] += 1.0 - spec.slip;
            row[other] += spec.slip;
        }
    }
    for a in 0..2 {
        transition[(terminal_state * 2 + a) * ns + terminal_state] = 1.0;
    }
    let mdp = FiniteMdp::new(ns, 2, transition, reward, gamma)?;
    let mut terminal = vec![false; ns];
    terminal[terminal_state] = true;
    let mut coordinates: Vec<Vec<f64>> = (0..n).map(|s| vec![s as f64 / (n - 1) as f64]).collect();
    coordinates.push(vec![-1.0]);
    let name = format!("chain-{n}-slip{}", spec.slip);
    Ok(EpisodicEnv::new(name, mdp, terminal, n / 2, coordinates))
}

/// Named environment or MDP generator, e.g. `gridworld-5x5-slip0.1`,
/// `chain-10-slip0`, `garnet-15x4-b3`.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvSpec {
    Gridworld(GridworldSpec),
    Chain(ChainSpec),
    Garnet(GarnetSpec),
}

impl EnvSpec {
    pub fn parse(name: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("unrecognized environment name '{name}'"));
        let parts: Vec<&str> = name.split('-').collect();
        match parts.as_slice() {
            ["gridworld", dims, slip] => {
                let (w, h) = dims.split_once('x').ok_or_else(bad)?;
                let w = w.parse().map_err(|_| bad())?;
                let h = h.parse().map_err(|_| bad())?;
                let slip = slip.strip_prefix("slip").ok_or_else(bad)?.parse().map_err(|_| bad())?;
                Ok(EnvSpec::Gridworld(GridworldSpec::new(w, h, slip)))
            }
            ["chain", n, slip] => {
                let n = n.parse().map_err(|_| bad())?;
                let slip = slip.strip_prefix("slip").ok_or_else(bad)?.parse().map_err(|_| bad())?;
                Ok(EnvSpec::Chain(ChainSpec::new(n, slip)))
            }
            ["garnet", dims, b] => {
                let (s, a) = dims.split_once('x').ok_or_else(bad)?;
                let s = s.parse().map_err(|_| bad())?;
                let a = a.parse().map_err(|_| bad())?;
                let b = b.strip_prefix('b').ok_or_else(bad)?.parse().map_err(|_| bad())?;
                Ok(EnvSpec::Garnet(GarnetSpec::new(s, a, b, 0)))
            }
            _ => Err(bad()),
        }
    }

    /// Episodic environment; Garnets have no terminal states and are
    /// rejected here.
    pub fn episodic(&self, gamma: f64) -> Result<EpisodicEnv> {
        match self {
            EnvSpec::Gridworld(g) => make_gridworld(g, gamma),
            EnvSpec::Chain(c) => make_chain(c, gamma),
            EnvSpec::Garnet(_) => invalid("Garnet MDPs are not episodic environments"),
        }
    }

    /// Tabular MDP; `seed` selects the Garnet instance.
    pub fn mdp(&self, gamma: f64, seed: u64) -> Result<FiniteMdp> {
        match self {
            EnvSpec::Garnet(g) => make_garnet(&GarnetSpec { seed, ..*g }, gamma),
            other => Ok(other.episodic(gamma)?.mdp().clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{greedy_policy, solve_q_star, DEFAULT_TOL};

    #[test]
    fn garnet_is_deterministic_per_seed() {
        let spec = GarnetSpec::new(12, 3, 4, 42);
        assert_eq!(make_garnet(&spec, 0.9).unwrap(), make_garnet(&spec, 0.9).unwrap());
        let other = GarnetSpec { seed: 43, ..spec };
        assert_ne!(make_garnet(&spec, 0.9).unwrap(), make_garnet(&other, 0.9).unwrap());
    }

    #[test]
    fn garnet_branching() {
        let mdp = make_garnet(&GarnetSpec::new(6, 2, 6, 1), 0.9).unwrap();
        for s in 0..6 {
            for a in 0..2 {
                assert!(mdp.transition_row(s, a).iter().all(|&p| p > 0.0));
            }
        }
        let mdp = make_garnet(&GarnetSpec::new(10, 3, 2, 1), 0.9).unwrap();
        for s in 0..10 {
            for a in 0..3 {
                let nz = mdp.transition_row(s, a).iter().filter(|&&p| p > 0.0).count();
                assert_eq!(nz, 2);
            }
        }
        assert!(make_garnet(&GarnetSpec::new(4, 2, 5, 1), 0.9).is_err());
    }

    #[test]
    fn garnet_rows_sum_to_one_over_many_seeds() {
        for seed in 0..100 {
            let mdp = make_garnet(&GarnetSpec::new(15, 4, 3, seed), 0.99).unwrap();
            for row in mdp.transition().chunks(15) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_gridworld_optimal_return() {
        let gamma = 0.99;
        let spec = GridworldSpec::new(5, 5, 0.0);
        let env = make_gridworld(&spec, gamma).unwrap();
        for row in env.mdp().transition().chunks(env.mdp().num_states()) {
            assert_eq!(row.iter().filter(|&&p| p == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&p| p == 0.0).count(), row.len() - 1);
        }
        let q = solve_q_star(env.mdp(), DEFAULT_TOL).unwrap();
        let v0 = q.row_max(env.start_state());
        let steps: f64 = (0..8).map(|i| gamma.powi(i)).sum();
        let want = spec.goal_reward * gamma.powi(8) + spec.step_reward * steps;
        assert!((v0 - want).abs() < 1e-9, "{v0} vs {want}");

        let pi = greedy_policy(&q);
        let mut env = env;
        env.seed(1);
        env.reset();
        let mut ret = 0.0;
        let mut disc = 1.0;
        loop {
            let a = crate::mdp::argmax_lowest(pi.row(env.current_state()));
            let r = env.step(a).unwrap();
            ret += disc * r.reward;
            disc *= gamma;
            if r.terminal {
                break;
            }
        }
        assert!((ret - want).abs() < 1e-9);
    }

    #[test]
    fn step_after_terminal_is_an_error() {
        let mut env = make_chain(&ChainSpec::new(3, 0.0), 0.9).unwrap();
        assert!(env.step(0).is_err());
        env.reset();
        env.step(0).unwrap();
        let r = env.step(0).unwrap();
        assert!(r.terminal);
        assert!(env.step(0).is_err());
    }

    #[test]
    fn truncation_is_flagged_separately() {
        let mut env = make_chain(&ChainSpec::new(9, 0.0), 0.9)
            .unwrap()
            .with_episode_cap(2);
        env.reset();
        assert!(!env.step(0).unwrap().truncated);
        let r = env.step(1).unwrap();
        assert!(r.truncated && !r.terminal);
    }

    #[test]
    fn chain_three_cells_hand_backup() {
        let gamma = 0.9;
        let env = make_chain(&ChainSpec::new(3, 0.0), gamma).unwrap();
        let q = solve_q_star(env.mdp(), DEFAULT_TOL).unwrap();
        // End cells pay their reward; the middle cell reaches either end in one move.
        assert!((q.get(0, 0) - 0.1).abs() < 1e-12);
        assert!((q.get(2, 1) - 1.0).abs() < 1e-12);
        assert!((q.get(1, 0) - gamma * 0.1).abs() < 1e-12);
        assert!((q.get(1, 1) - gamma * 1.0).abs() < 1e-12);
        assert_eq!(q.get(3, 0), 0.0);
    }

    #[test]
    fn symmetric_chain_tie_breaks_low() {
        let spec = ChainSpec {
            length: 5,
            left_reward: 1.0,
            right_reward: 1.0,
            slip: 0.0,
        };
        let env = make_chain(&spec, 0.9).unwrap();
        let q = solve_q_star(env.mdp(), DEFAULT_TOL).unwrap();
        let pi = greedy_policy(&q);
        assert_eq!(q.get(2, 0), q.get(2, 1));
        assert_eq!(pi.row(2), &[1.0, 0.0]);
    }

    #[test]
    fn slippery_chain_rows_sum_to_one() {
        let env = make_chain(&ChainSpec::new(7, 0.1), 0.9).unwrap();
        for row in env.mdp().transition().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_geometry() {
        let mut spec = GridworldSpec::new(5, 5, 0.1);
        spec.goal = (5, 0);
        assert!(make_gridworld(&spec, 0.9).is_err());
        assert!(make_gridworld(&GridworldSpec::new(5, 5, 1.0), 0.9).is_err());
        assert!(make_chain(&ChainSpec::new(2, 0.0), 0.9).is_err());
    }

    #[test]
    fn names_parse() {
        assert_eq!(
            EnvSpec::parse("gridworld-5x5-slip0.1").unwrap(),
            EnvSpec::Gridworld(GridworldSpec::new(5, 5, 0.1))
        );
        assert_eq!(
            EnvSpec::parse("chain-10-slip0").unwrap(),
            EnvSpec::Chain(ChainSpec::new(10, 0.0))
        );
        assert!(matches!(EnvSpec::parse("garnet-15x4-b3").unwrap(), EnvSpec::Garnet(_)));
        assert!(EnvSpec::parse("atari-pong").is_err());
    }

    #[test]
    fn encodings() {
        let env = make_gridworld(&GridworldSpec::new(3, 2, 0.0), 0.9).unwrap();
        assert_eq!(env.observation_dim(), 7);
        let env = env.with_encoding(ObservationEncoding::Coordinates);
        assert_eq!(env.encode(5), vec![1.0, 1.0]);
        let env = env.with_encoding(ObservationEncoding::StateIndex);
        assert_eq!(env.encode(4), vec![4.0]);
    }
}
