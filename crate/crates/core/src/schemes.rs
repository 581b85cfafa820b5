//! Abstract approximate value-iteration schemes with controlled error
//! injection: Munchausen VI, mirror-descent VI, the CVI-form rewriting,
//! advantage learning, plain AVI and entropy-regularized AVI.
//!
//! Every step takes an error table `ε` that is added to the q-update only.
//! The greedy step is always exact. Log-policies are never clipped here.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mdp::{greedy_policy, solve_q_pi, FiniteMdp, QFunction, StochasticPolicy, DEFAULT_TOL};
use crate::regularized::{log_softmax_row, stable_lse, TemperatureParams, PROB_FLOOR};

/// Runs stop and are flagged as diverged once any `|q|` exceeds this.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Iterate of a scheme: `q_k`, `π_k` and `ln π_k`.
///
/// For mirror-descent VI, `q` holds the scheme's own variable `q'_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeState {
    pub q: QFunction,
    pub policy: StochasticPolicy,
    /// `ln π_k`, `-inf` where `π_k` is exactly zero.
    pub log_policy: QFunction,
    pub iteration: usize,
}

impl SchemeState {
    pub fn new(q: QFunction, policy: StochasticPolicy) -> Result<Self> {
        if q.num_states() != policy.num_states() || q.num_actions() != policy.num_actions() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", q.num_states(), q.num_actions()),
                got: format!("{}x{}", policy.num_states(), policy.num_actions()),
            });
        }
        if !q.is_finite() {
            return invalid("initial q-function must be finite");
        }
        let log_policy = QFunction::from_vec(
            q.num_states(),
            q.num_actions(),
            policy
                .probs()
                .iter()
                .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
                .collect(),
        )?;
        Ok(Self {
            q,
            policy,
            log_policy,
            iteration: 0,
        })
    }

    /// `q = 0`, uniform `π`.
    pub fn initial(mdp: &FiniteMdp) -> Self {
        let (s, a) = (mdp.num_states(), mdp.num_actions());
        Self::new(QFunction::zeros(s, a), StochasticPolicy::uniform(s, a)).expect("valid shapes")
    }

    fn from_log_policy(q: QFunction, log_policy: QFunction, iteration: usize) -> Self {
        let probs = log_policy.values().iter().map(|l| l.exp()).collect();
        let policy =
            StochasticPolicy::from_probs_unchecked(q.num_states(), q.num_actions(), probs);
        Self {
            q,
            policy,
            log_policy,
            iteration,
        }
    }

    fn from_greedy(q: QFunction, greedy_of: &QFunction, iteration: usize) -> Self {
        let policy = greedy_policy(greedy_of);
        let log_policy = QFunction::from_vec(
            q.num_states(),
            q.num_actions(),
            policy
                .probs()
                .iter()
                .map(|&p| if p > 0.0 { 0.0 } else { f64::NEG_INFINITY })
                .collect(),
        )
        .expect("same shape");
        Self {
            q,
            policy,
            log_policy,
            iteration,
        }
    }
}

fn check_inputs(mdp: &FiniteMdp, state: &SchemeState, eps: &QFunction) -> Result<()> {
    mdp.check_q(&state.q)?;
    mdp.check_policy(&state.policy)?;
    mdp.check_q(eps)
}

fn positive_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return invalid(format!("scheme requires tau > 0, got {tau}"));
    }
    Ok(())
}

/// `τ ln softmax(q/τ)` for every row.
fn scaled_log_softmax(q: &QFunction, tau: f64) -> Result<QFunction> {
    let mut values = Vec::with_capacity(q.values().len());
    for row in q.rows() {
        values.extend(log_softmax_row(row, tau)?);
    }
    QFunction::from_vec(q.num_states(), q.num_actions(), values)
}

/// Shared body of M-VI and soft AVI:
/// `q' = r + α τ ln π + γ P⟨π, q − τ ln π⟩ + ε` with `π = softmax(q/τ)`.
fn munchausen_update(
    mdp: &FiniteMdp,
    state: &SchemeState,
    alpha: f64,
    tau: f64,
    eps: &QFunction,
) -> Result<SchemeState> {
    positive_tau(tau)?;
    check_inputs(mdp, state, eps)?;
    let tau_log_pi = scaled_log_softmax(&state.q, tau)?;
    let log_pi = tau_log_pi.map(|v| v / tau);
    let next = SchemeState::from_log_policy(state.q.clone(), log_pi, state.iteration + 1);
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut v = vec![0.0; ns];
    for (s, v) in v.iter_mut().enumerate() {
        for a in 0..na {
            let p = next.policy.prob(s, a);
            if p > 0.0 {
                *v += p * (state.q.get(s, a) - tau_log_pi.get(s, a));
            }
        }
    }
    let pv = mdp.expect_next(&v);
    let gamma = mdp.gamma();
    let mut q = QFunction::zeros(ns, na);
    for s in 0..ns {
        for a in 0..na {
            let i = s * na + a;
            let value = mdp.reward(s, a) + alpha * tau_log_pi.get(s, a) + gamma * pv[i]
                + eps.get(s, a);
            q.set(s, a, value);
        }
    }
    Ok(SchemeState { q, ..next })
}

/// One step of Munchausen VI(α, τ).
pub fn mvi_step(
    mdp: &FiniteMdp,
    state: &SchemeState,
    params: &TemperatureParams,
    eps: &QFunction,
) -> Result<SchemeState> {
    params.validate()?;
    munchausen_update(mdp, state, params.alpha, params.tau, eps)
}

/// One step of entropy-regularized AVI at temperature `tau`.
pub fn soft_avi_step(
    mdp: &FiniteMdp,
    state: &SchemeState,
    tau: f64,
    eps: &QFunction,
) -> Result<SchemeState> {
    munchausen_update(mdp, state, 0.0, tau, eps)
}

/// One step of mirror-descent VI with KL weight `lambda_kl` and entropy
/// weight `tau_ent`. `state.q` holds `q'_k`.
///
/// The greedy step is solved in closed form:
/// `π_{k+1} ∝ π_k^{λ/(λ+τ')} exp(q'_k/(λ+τ'))`.
pub fn mdvi_step(
    mdp: &FiniteMdp,
    state: &SchemeState,
    lambda_kl: f64,
    tau_ent: f64,
    eps: &QFunction,
) -> Result<SchemeState> {
    if !(lambda_kl >= 0.0) || !(tau_ent >= 0.0) {
        return invalid("regularization weights must be non-negative");
    }
    let total = lambda_kl + tau_ent;
    if !(total > 0.0) {
        return invalid("mirror-descent VI needs a positive KL or entropy weight");
    }
    check_inputs(mdp, state, eps)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut log_pi = QFunction::zeros(ns, na);
    let mut logits = vec![0.0; na];
    for s in 0..ns {
        for (a, l) in logits.iter_mut().enumerate() {
            let prior = state.log_policy.get(s, a);
            let kl_part = if lambda_kl > 0.0 { lambda_kl * prior } else { 0.0 };
            *l = kl_part + state.q.get(s, a);
        }
        let scaled = log_softmax_row(&logits, total)?;
        for (a, v) in scaled.into_iter().enumerate() {
            log_pi.set(s, a, v / total);
        }
    }
    let next = SchemeState::from_log_policy(state.q.clone(), log_pi, state.iteration + 1);
    // ⟨π', q'⟩ − λ KL(π'||π) + τ' H(π') = ⟨π', q' − λ(ln π' − ln π) − τ' ln π'⟩
    let mut v = vec![0.0; ns];
    for (s, v) in v.iter_mut().enumerate() {
        for a in 0..na {
            let p = next.policy.prob(s, a);
            if p <= PROB_FLOOR {
                continue;
            }
            let lp = next.log_policy.get(s, a);
            let kl_term = if lambda_kl > 0.0 {
                lambda_kl * (lp - state.log_policy.get(s, a))
            } else {
                0.0
            };
            *v += p * (state.q.get(s, a) - kl_term - tau_ent * lp);
        }
    }
    let mut q = mdp.backup(&v);
    for (qi, e) in q.values_mut().iter_mut().zip(eps.values()) {
        *qi += e;
    }
    Ok(SchemeState { q, ..next })
}

/// One step of the CVI-form rewriting of M-VI:
/// `q' = r + γ P lse_τ(q) + α(q − lse_τ(q)) + ε`.
pub fn cvi_step(
    mdp: &FiniteMdp,
    state: &SchemeState,
    params: &TemperatureParams,
    eps: &QFunction,
) -> Result<SchemeState> {
    params.validate()?;
    positive_tau(params.tau)?;
    check_inputs(mdp, state, eps)?;
    let tau = params.tau;
    let lse: Vec<f64> = state
        .q
        .rows()
        .map(|row| stable_lse(row, tau))
        .collect::<Result<_>>()?;
    let log_pi = scaled_log_softmax(&state.q, tau)?.map(|v| v / tau);
    let next = SchemeState::from_log_policy(state.q.clone(), log_pi, state.iteration + 1);
    let plse = mdp.expect_next(&lse);
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let gamma = mdp.gamma();
    let mut q = QFunction::zeros(ns, na);
    for s in 0..ns {
        for a in 0..na {
            let value = mdp.reward(s, a)
                + gamma * plse[s * na + a]
                + params.alpha * (state.q.get(s, a) - lse[s])
                + eps.get(s, a);
            q.set(s, a, value);
        }
    }
    Ok(SchemeState { q, ..next })
}

/// One step of advantage learning:
/// `q' = r + γ P max q + α(q − max q) + ε`, greedy policy.
pub fn al_step(mdp: &FiniteMdp, state: &SchemeState, alpha: f64, eps: &QFunction) -> Result<SchemeState> {
    if !(0.0..=1.0).contains(&alpha) {
        return invalid(format!("alpha must lie in [0,1], got {alpha}"));
    }
    check_inputs(mdp, state, eps)?;
    let m: Vec<f64> = (0..mdp.num_states()).map(|s| state.q.row_max(s)).collect();
    let pm = mdp.expect_next(&m);
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let gamma = mdp.gamma();
    let mut q = QFunction::zeros(ns, na);
    for s in 0..ns {
        for a in 0..na {
            let value = mdp.reward(s, a)
                + gamma * pm[s * na + a]
                + alpha * (state.q.get(s, a) - m[s])
                + eps.get(s, a);
            q.set(s, a, value);
        }
    }
    Ok(SchemeState::from_greedy(q, &state.q, state.iteration + 1))
}

/// One step of approximate value iteration: `q' = r + γ P max q + ε`.
pub fn avi_step(mdp: &FiniteMdp, state: &SchemeState, eps: &QFunction) -> Result<SchemeState> {
    check_inputs(mdp, state, eps)?;
    let m: Vec<f64> = (0..mdp.num_states()).map(|s| state.q.row_max(s)).collect();
    let mut q = mdp.backup(&m);
    for (qi, e) in q.values_mut().iter_mut().zip(eps.values()) {
        *qi += e;
    }
    Ok(SchemeState::from_greedy(q, &state.q, state.iteration + 1))
}

/// Scheme selector for [`run_scheme`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Munchausen VI(α, τ).
    Mvi,
    /// Mirror-descent VI with KL weight `ατ` and entropy weight `(1−α)τ`.
    Mdvi,
    /// CVI-form rewriting of M-VI(α, τ).
    Cvi,
    /// Advantage learning (α, τ must be 0).
    Al,
    /// Approximate VI (α = τ = 0).
    Avi,
    /// Entropy-regularized AVI (α = 0).
    SoftAvi,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Mvi,
        Scheme::Mdvi,
        Scheme::Cvi,
        Scheme::Al,
        Scheme::Avi,
        Scheme::SoftAvi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Mvi => "mvi",
            Scheme::Mdvi => "mdvi",
            Scheme::Cvi => "cvi",
            Scheme::Al => "al",
            Scheme::Avi => "avi",
            Scheme::SoftAvi => "soft-avi",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Parse(format!("unknown scheme '{name}'")))
    }

    fn check_params(self, params: &TemperatureParams) -> Result<()> {
        params.validate()?;
        match self {
            Scheme::Mvi | Scheme::Cvi | Scheme::Mdvi => positive_tau(params.tau),
            Scheme::SoftAvi => {
                positive_tau(params.tau)?;
                if params.alpha != 0.0 {
                    return invalid("soft AVI takes no Munchausen scaling (alpha must be 0)");
                }
                Ok(())
            }
            Scheme::Al => {
                if params.tau != 0.0 {
                    return invalid("advantage learning takes no temperature (tau must be 0)");
                }
                Ok(())
            }
            Scheme::Avi => {
                if params.tau != 0.0 || params.alpha != 0.0 {
                    return invalid("AVI takes no temperature or Munchausen scaling");
                }
                Ok(())
            }
        }
    }

    /// Applies one step of this scheme.
    pub fn step(
        self,
        mdp: &FiniteMdp,
        state: &SchemeState,
        params: &TemperatureParams,
        eps: &QFunction,
    ) -> Result<SchemeState> {
        match self {
            Scheme::Mvi => mvi_step(mdp, state, params, eps),
            Scheme::Mdvi => mdvi_step(
                mdp,
                state,
                params.alpha * params.tau,
                (1.0 - params.alpha) * params.tau,
                eps,
            ),
            Scheme::Cvi => cvi_step(mdp, state, params, eps),
            Scheme::Al => al_step(mdp, state, params.alpha, eps),
            Scheme::Avi => avi_step(mdp, state, eps),
            Scheme::SoftAvi => soft_avi_step(mdp, state, params.tau, eps),
        }
    }

    /// Scaling applied to `τ ln π_k` when converting `q_k` to `q'_k`.
    fn log_policy_weight(self, params: &TemperatureParams) -> f64 {
        match self {
            Scheme::Mvi | Scheme::Cvi => params.alpha * params.tau,
            _ => 0.0,
        }
    }
}

/// Kind of injected error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    None,
    GaussianIid,
    UniformIid,
    /// One random ±scale table drawn at the start and repeated every step.
    AdversarialFixed,
}

impl ErrorKind {
    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::None => "none",
            ErrorKind::GaussianIid => "gaussian",
            ErrorKind::UniformIid => "uniform",
            ErrorKind::AdversarialFixed => "adversarial",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(ErrorKind::None),
            "gaussian" | "gaussian-iid" => Ok(ErrorKind::GaussianIid),
            "uniform" | "uniform-iid" => Ok(ErrorKind::UniformIid),
            "adversarial" | "adversarial-fixed" => Ok(ErrorKind::AdversarialFixed),
            other => Err(Error::Parse(format!("unknown error kind '{other}'"))),
        }
    }
}

/// Source of the per-step error tables `ε_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorModel {
    pub kind: ErrorKind,
    pub scale: f64,
    pub seed: u64,
    /// When set, `ε_k` is taken from this list (index `k − 1`) instead.
    pub precomputed: Option<Vec<QFunction>>,
}

impl ErrorModel {
    pub fn none() -> Self {
        Self {
            kind: ErrorKind::None,
            scale: 0.0,
            seed: 0,
            precomputed: None,
        }
    }

    pub fn gaussian(scale: f64, seed: u64) -> Self {
        Self {
            kind: ErrorKind::GaussianIid,
            scale,
            seed,
            precomputed: None,
        }
    }

    pub fn uniform(scale: f64, seed: u64) -> Self {
        Self {
            kind: ErrorKind::UniformIid,
            scale,
            seed,
            precomputed: None,
        }
    }

    pub fn adversarial(scale: f64, seed: u64) -> Self {
        Self {
            kind: ErrorKind::AdversarialFixed,
            scale,
            seed,
            precomputed: None,
        }
    }

    pub fn precomputed(sequence: Vec<QFunction>) -> Self {
        Self {
            kind: ErrorKind::None,
            scale: 0.0,
            seed: 0,
            precomputed: Some(sequence),
        }
    }

    pub fn validate(&self, mdp: &FiniteMdp) -> Result<()> {
        if !(self.scale >= 0.0) {
            return invalid("error scale must be non-negative");
        }
        if let Some(seq) = &self.precomputed {
            for e in seq {
                mdp.check_q(e)?;
            }
        }
        Ok(())
    }

    pub fn descriptor(&self) -> String {
        match &self.precomputed {
            Some(seq) => format!("precomputed(len={})", seq.len()),
            None => format!("{}(scale={},seed={})", self.kind.name(), self.scale, self.seed),
        }
    }

    /// Iterator yielding `ε_1, ε_2, …` for an `|S|×|A|` problem.
    pub fn stream(&self, num_states: usize, num_actions: usize) -> ErrorStream<'_> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let fixed = match (self.kind, &self.precomputed) {
            (ErrorKind::AdversarialFixed, None) => {
                let values = (0..num_states * num_actions)
                    .map(|_| if rng.gen::<bool>() { self.scale } else { -self.scale })
                    .collect();
                Some(QFunction::from_vec(num_states, num_actions, values).expect("shape"))
            }
            _ => None,
        };
        ErrorStream {
            model: self,
            rng,
            fixed,
            num_states,
            num_actions,
            k: 0,
        }
    }
}

pub struct ErrorStream<'a> {
    model: &'a ErrorModel,
    rng: ChaCha8Rng,
    fixed: Option<QFunction>,
    num_states: usize,
    num_actions: usize,
    k: usize,
}

impl Iterator for ErrorStream<'_> {
    type Item = QFunction;

    fn next(&mut self) -> Option<QFunction> {
        self.k += 1;
        let n = self.num_states * self.num_actions;
        if let Some(seq) = &self.model.precomputed {
            return Some(
                seq.get(self.k - 1)
                    .cloned()
                    .unwrap_or_else(|| QFunction::zeros(self.num_states, self.num_actions)),
            );
        }
        let values = match self.model.kind {
            ErrorKind::None => vec![0.0; n],
            ErrorKind::GaussianIid => {
                let normal = Normal::new(0.0, self.model.scale.max(0.0)).expect("finite scale");
                (0..n).map(|_| normal.sample(&mut self.rng)).collect()
            }
            ErrorKind::UniformIid => (0..n)
                .map(|_| self.model.scale * (2.0 * self.rng.gen::<f64>() - 1.0))
                .collect(),
            ErrorKind::AdversarialFixed => {
                return self.fixed.clone();
            }
        };
        Some(QFunction::from_vec(self.num_states, self.num_actions, values).expect("shape"))
    }
}

/// Options for [`run_scheme`].
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub iterations: usize,
    /// Defaults to zero.
    pub q0: Option<QFunction>,
    /// Defaults to uniform.
    pub pi0: Option<StochasticPolicy>,
    /// Compute `‖q* − q_{π_k}‖∞` at every `k` (one linear solve per step).
    pub track_optimality: bool,
}

impl RunOptions {
    pub fn new(iterations: usize) -> Self {
        Self {
            iterations,
            q0: None,
            pi0: None,
            track_optimality: false,
        }
    }

    pub fn tracking(mut self) -> Self {
        self.track_optimality = true;
        self
    }

    pub fn with_q0(mut self, q0: QFunction) -> Self {
        self.q0 = Some(q0);
        self
    }

    pub fn with_pi0(mut self, pi0: StochasticPolicy) -> Self {
        self.pi0 = Some(pi0);
        self
    }
}

/// One recorded iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub k: usize,
    pub q: QFunction,
    pub policy: StochasticPolicy,
    pub log_policy: QFunction,
    /// `ε_k`; zero at `k = 0`.
    pub eps: QFunction,
    /// `q'_k = q_k − ατ ln π_k` (equal to `q_k` for schemes without a
    /// Munchausen term, and for MD-VI whose variable already is `q'`).
    pub q_prime: QFunction,
    /// `max_a q_k(s,a) − q_k(s,·)`.
    pub gaps: QFunction,
    /// `‖q* − q_{π_k}‖∞` when tracked.
    pub sup_dist_to_opt: Option<f64>,
}

/// History of a scheme run.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub scheme: Scheme,
    pub params: TemperatureParams,
    pub error_descriptor: String,
    pub entries: Vec<TraceEntry>,
    /// Set when `|q|` exceeded [`DIVERGENCE_THRESHOLD`]; the run stopped there.
    pub diverged: bool,
}

impl IterationTrace {
    pub fn last(&self) -> &TraceEntry {
        self.entries.last().expect("trace has the initial entry")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Errors `ε_1..ε_K` in order.
    pub fn errors(&self) -> impl Iterator<Item = &QFunction> {
        self.entries.iter().skip(1).map(|e| &e.eps)
    }

    /// Writes the CSV summary (one row per `k`).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_CSV_HEADER)?;
        let mut cumulative: Option<QFunction> = None;
        for e in &self.entries {
            let cum_norm = if e.k == 0 {
                0.0
            } else {
                let c = match cumulative.take() {
                    Some(c) => c.axpy(1.0, &e.eps),
                    None => e.eps.clone(),
                };
                let norm = c.sup_norm() / e.k as f64;
                cumulative = Some(c);
                norm
            };
            let n = e.gaps.values().len().max(1) as f64;
            let mean_gap = e.gaps.values().iter().sum::<f64>() / n;
            let max_gap = e.gaps.values().iter().copied().fold(0.0, f64::max);
            w.write_record([
                e.k.to_string(),
                self.scheme.name().to_string(),
                self.params.alpha.to_string(),
                self.params.tau.to_string(),
                e.sup_dist_to_opt.map_or(String::new(), |d| d.to_string()),
                mean_gap.to_string(),
                max_gap.to_string(),
                e.eps.sup_norm().to_string(),
                cum_norm.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Column order of the trace CSV.
pub const TRACE_CSV_HEADER: [&str; 9] = [
    "k",
    "scheme",
    "alpha",
    "tau",
    "sup_dist_to_opt",
    "mean_gap",
    "max_gap",
    "err_norm",
    "cumulative_err_avg_norm",
];

fn gaps_of(q: &QFunction) -> QFunction {
    let mut g = QFunction::zeros(q.num_states(), q.num_actions());
    for s in 0..q.num_states() {
        let m = q.row_max(s);
        for a in 0..q.num_actions() {
            g.set(s, a, m - q.get(s, a));
        }
    }
    g
}

fn entry(
    mdp: &FiniteMdp,
    scheme: Scheme,
    params: &TemperatureParams,
    state: &SchemeState,
    eps: QFunction,
    q_star: Option<&QFunction>,
) -> Result<TraceEntry> {
    let weight = scheme.log_policy_weight(params);
    let q_prime = if weight == 0.0 {
        state.q.clone()
    } else {
        let values = state
            .q
            .values()
            .iter()
            .zip(state.log_policy.values())
            .map(|(q, l)| q - weight * l)
            .collect();
        QFunction::from_vec(state.q.num_states(), state.q.num_actions(), values)?
    };
    let sup_dist_to_opt = match q_star {
        Some(q_star) => Some(solve_q_pi(mdp, &state.policy, DEFAULT_TOL)?.sup_distance(q_star)),
        None => None,
    };
    Ok(TraceEntry {
        k: state.iteration,
        q: state.q.clone(),
        policy: state.policy.clone(),
        log_policy: state.log_policy.clone(),
        eps,
        q_prime,
        gaps: gaps_of(&state.q),
        sup_dist_to_opt,
    })
}

/// Runs `scheme` for `options.iterations` steps from `(q0, π0)`, drawing
/// `ε_k` from `error_model`. The error sequence depends only on the model,
/// so two schemes run with the same model see identical errors.
pub fn run_scheme(
    mdp: &FiniteMdp,
    scheme: Scheme,
    params: &TemperatureParams,
    error_model: &ErrorModel,
    options: &RunOptions,
) -> Result<IterationTrace> {
    if options.iterations < 1 {
        return invalid("iterations must be >= 1");
    }
    scheme.check_params(params)?;
    error_model.validate(mdp)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let q0 = options.q0.clone().unwrap_or_else(|| QFunction::zeros(ns, na));
    let pi0 = options
        .pi0
        .clone()
        .unwrap_or_else(|| StochasticPolicy::uniform(ns, na));
    mdp.check_q(&q0)?;
    mdp.check_policy(&pi0)?;
    let mut state = SchemeState::new(q0, pi0)?;
    let q_star = if options.track_optimality {
        Some(crate::mdp::solve_q_star(mdp, DEFAULT_TOL)?)
    } else {
        None
    };
    let mut entries = Vec::with_capacity(options.iterations + 1);
    entries.push(entry(
        mdp,
        scheme,
        params,
        &state,
        QFunction::zeros(ns, na),
        q_star.as_ref(),
    )?);
    let mut diverged = false;
    let mut errors = error_model.stream(ns, na);
    for _ in 0..options.iterations {
        let eps = errors.next().expect("infinite stream");
        state = scheme.step(mdp, &state, params, &eps)?;
        let blown = state
            .q
            .values()
            .iter()
            .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD);
        if blown {
            diverged = true;
            break;
        }
        entries.push(entry(mdp, scheme, params, &state, eps, q_star.as_ref())?);
    }
    Ok(IterationTrace {
        scheme,
        params: *params,
        error_descriptor: error_model.descriptor(),
        entries,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_garnet, GarnetSpec};
    use crate::mdp::solve_q_star;

    const LN2: f64 = std::f64::consts::LN_2;

    fn garnet(seed: u64) -> FiniteMdp {
        make_garnet(&GarnetSpec::new(15, 4, 3, seed), 0.99).unwrap()
    }

    fn single_state() -> FiniteMdp {
        FiniteMdp::new(1, 2, vec![1.0, 1.0], vec![1.0, 0.0], 0.5)
            .unwrap()
            .with_gamma(1e-300)
            .unwrap()
    }

    #[test]
    fn mvi_single_step_closed_form() {
        // γ is effectively zero; P-term vanishes.
        let mdp = single_state();
        let state = SchemeState::initial(&mdp);
        let params = TemperatureParams::new(1.0, 1.0, -1.0).unwrap();
        let eps = QFunction::zeros(1, 2);
        let next = mvi_step(&mdp, &state, &params, &eps).unwrap();
        assert!((next.policy.prob(0, 0) - 0.5).abs() < 1e-15);
        assert!((next.q.get(0, 0) - (1.0 - LN2)).abs() < 1e-12);
        assert!((next.q.get(0, 1) + LN2).abs() < 1e-12);
        let cvi = cvi_step(&mdp, &state, &params, &eps).unwrap();
        assert!(cvi.q.sup_distance(&next.q) < 1e-12);
    }

    #[test]
    fn mvi_alpha_zero_is_soft_avi_exactly() {
        let mdp = garnet(3);
        let params = TemperatureParams::new(0.1, 0.0, -1.0).unwrap();
        let model = ErrorModel::gaussian(0.1, 9);
        let mut errors = model.stream(15, 4);
        let mut a = SchemeState::initial(&mdp);
        let mut b = a.clone();
        for _ in 0..10 {
            let eps = errors.next().unwrap();
            a = mvi_step(&mdp, &a, &params, &eps).unwrap();
            b = soft_avi_step(&mdp, &b, 0.1, &eps).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mvi_rejects_zero_tau() {
        let mdp = garnet(0);
        let params = TemperatureParams::new(0.0, 0.9, -1.0).unwrap();
        let st = SchemeState::initial(&mdp);
        assert!(mvi_step(&mdp, &st, &params, &QFunction::zeros(15, 4)).is_err());
        assert!(cvi_step(&mdp, &st, &params, &QFunction::zeros(15, 4)).is_err());
        assert!(soft_avi_step(&mdp, &st, 0.0, &QFunction::zeros(15, 4)).is_err());
    }

    #[test]
    fn mvi_matches_cvi_over_twenty_steps() {
        let mdp = garnet(5);
        let params = TemperatureParams::new(0.03, 0.9, -1.0).unwrap();
        let mvi = run_scheme(&mdp, Scheme::Mvi, &params, &ErrorModel::none(), &RunOptions::new(20)).unwrap();
        let cvi = run_scheme(&mdp, Scheme::Cvi, &params, &ErrorModel::none(), &RunOptions::new(20)).unwrap();
        for (a, b) in mvi.entries.iter().zip(&cvi.entries) {
            assert!(a.q.sup_distance(&b.q) < 1e-8);
        }
    }

    #[test]
    fn cvi_alpha_zero_is_soft_q_learning() {
        let mdp = garnet(2);
        let params = TemperatureParams::new(0.5, 0.0, -1.0).unwrap();
        let st = SchemeState::initial(&mdp);
        let st = cvi_step(&mdp, &st, &params, &QFunction::zeros(15, 4)).unwrap();
        let next = cvi_step(&mdp, &st, &params, &QFunction::zeros(15, 4)).unwrap();
        let soft = crate::mdp::soft_bellman_optimality(&mdp, &st.q, 0.5);
        assert!(next.q.sup_distance(&soft) < 1e-12);
    }

    #[test]
    fn mdvi_special_cases() {
        let mdp = garnet(4);
        let eps = QFunction::zeros(15, 4);
        let st = SchemeState::initial(&mdp);
        let st = avi_step(&mdp, &st, &eps).unwrap();
        let st = SchemeState::new(st.q, StochasticPolicy::uniform(15, 4)).unwrap();
        // λ = 0: entropy-only step on q'.
        let a = mdvi_step(&mdp, &st, 0.0, 0.2, &eps).unwrap();
        let b = soft_avi_step(&mdp, &st, 0.2, &eps).unwrap();
        assert!(a.q.sup_distance(&b.q) < 1e-12);
        assert!(a.policy.sup_distance(&b.policy) < 1e-12);
        // τ' = 0 with uniform prior: first policy is softmax(q'/λ).
        let c = mdvi_step(&mdp, &st, 0.3, 0.0, &eps).unwrap();
        let want = crate::regularized::softmax_policy(&st.q, 0.3).unwrap();
        assert!(c.policy.sup_distance(&want) < 1e-12);
        assert!(mdvi_step(&mdp, &st, 0.0, 0.0, &eps).is_err());
    }

    #[test]
    fn al_special_cases() {
        let mdp = garnet(6);
        let eps = QFunction::zeros(15, 4);
        let mut st = SchemeState::initial(&mdp);
        for _ in 0..3 {
            st = avi_step(&mdp, &st, &eps).unwrap();
        }
        let avi = avi_step(&mdp, &st, &eps).unwrap();
        let al0 = al_step(&mdp, &st, 0.0, &eps).unwrap();
        assert_eq!(avi.q, al0.q);
        let al = al_step(&mdp, &st, 0.9, &eps).unwrap();
        for s in 0..15 {
            let best = crate::mdp::argmax_lowest(st.q.row(s));
            assert_eq!(al.q.get(s, best), avi.q.get(s, best));
            for a in 0..4 {
                assert!(al.q.get(s, a) <= avi.q.get(s, a));
            }
        }
    }

    #[test]
    fn cvi_tiny_tau_tracks_al() {
        let mdp = garnet(8);
        let params = TemperatureParams::new(1e-6, 0.9, -1.0).unwrap();
        let eps = QFunction::zeros(15, 4);
        let mut a = SchemeState::initial(&mdp);
        a = avi_step(&mdp, &a, &eps).unwrap();
        let mut b = a.clone();
        for _ in 0..10 {
            a = cvi_step(&mdp, &a, &params, &eps).unwrap();
            b = al_step(&mdp, &b, 0.9, &eps).unwrap();
        }
        assert!(a.q.sup_distance(&b.q) <= 1e-4);
    }

    #[test]
    fn avi_and_soft_avi_reach_their_fixed_points() {
        let mdp = make_garnet(&GarnetSpec::new(10, 3, 2, 1), 0.8).unwrap();
        let q_star = solve_q_star(&mdp, 1e-12).unwrap();
        let trace = run_scheme(
            &mdp,
            Scheme::Avi,
            &TemperatureParams::new(0.0, 0.0, -1.0).unwrap(),
            &ErrorModel::none(),
            &RunOptions::new(200),
        )
        .unwrap();
        assert!(trace.last().q.sup_distance(&q_star) < 1e-10);
        let soft = crate::mdp::solve_soft_q_star(&mdp, 0.1, 1e-12).unwrap();
        let trace = run_scheme(
            &mdp,
            Scheme::SoftAvi,
            &TemperatureParams::new(0.1, 0.0, -1.0).unwrap(),
            &ErrorModel::none(),
            &RunOptions::new(200),
        )
        .unwrap();
        assert!(trace.last().q.sup_distance(&soft) < 1e-10);
    }

    #[test]
    fn run_scheme_single_iteration_equals_step() {
        let mdp = garnet(1);
        let params = TemperatureParams::new(0.03, 0.9, -1.0).unwrap();
        let trace = run_scheme(&mdp, Scheme::Mvi, &params, &ErrorModel::none(), &RunOptions::new(1)).unwrap();
        let step = mvi_step(&mdp, &SchemeState::initial(&mdp), &params, &QFunction::zeros(15, 4)).unwrap();
        assert_eq!(trace.len(), 2);
        assert_eq!(trace.last().q, step.q);
    }

    #[test]
    fn run_scheme_rejects_mismatched_params() {
        let mdp = garnet(1);
        let with_tau = TemperatureParams::new(0.03, 0.9, -1.0).unwrap();
        assert!(run_scheme(&mdp, Scheme::Al, &with_tau, &ErrorModel::none(), &RunOptions::new(3)).is_err());
        assert!(run_scheme(&mdp, Scheme::Avi, &with_tau, &ErrorModel::none(), &RunOptions::new(3)).is_err());
        assert!(run_scheme(&mdp, Scheme::SoftAvi, &with_tau, &ErrorModel::none(), &RunOptions::new(3)).is_err());
        assert!(run_scheme(&mdp, Scheme::Mvi, &with_tau, &ErrorModel::none(), &RunOptions::new(0)).is_err());
    }

    #[test]
    fn same_seed_same_errors_across_schemes() {
        let mdp = garnet(1);
        let model = ErrorModel::gaussian(0.1, 77);
        let a = run_scheme(
            &mdp,
            Scheme::Mvi,
            &TemperatureParams::new(0.03, 1.0, -1.0).unwrap(),
            &model,
            &RunOptions::new(15),
        )
        .unwrap();
        let b = run_scheme(
            &mdp,
            Scheme::Avi,
            &TemperatureParams::new(0.0, 0.0, -1.0).unwrap(),
            &model,
            &RunOptions::new(15),
        )
        .unwrap();
        for (x, y) in a.errors().zip(b.errors()) {
            let bx: Vec<u64> = x.values().iter().map(|v| v.to_bits()).collect();
            let by: Vec<u64> = y.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
    }

    #[test]
    fn error_accounting() {
        let mdp = garnet(1);
        let params = TemperatureParams::new(0.03, 0.9, -1.0).unwrap();
        let t = run_scheme(&mdp, Scheme::Mvi, &params, &ErrorModel::none(), &RunOptions::new(5)).unwrap();
        assert!(t.errors().all(|e| e.values().iter().all(|&v| v == 0.0)));
        let seq: Vec<QFunction> = (0..5)
            .map(|k| QFunction::constant(15, 4, if k % 2 == 0 { 0.3 } else { -0.3 }))
            .collect();
        let t = run_scheme(&mdp, Scheme::Mvi, &params, &ErrorModel::precomputed(seq.clone()), &RunOptions::new(5))
            .unwrap();
        for (got, want) in t.errors().zip(&seq) {
            assert_eq!(got, want);
        }
        let adv = ErrorModel::adversarial(0.2, 3);
        let mut s = adv.stream(15, 4);
        let first = s.next().unwrap();
        assert_eq!(s.next().unwrap(), first);
        assert!(first.values().iter().all(|v| v.abs() == 0.2));
    }

    #[test]
    fn alpha_one_flags_divergence_eventually() {
        let mdp = FiniteMdp::new(1, 2, vec![1.0, 1.0], vec![1.0, 0.0], 0.5).unwrap();
        let params = TemperatureParams::new(1.0, 1.0, -1.0).unwrap();
        let t = run_scheme(&mdp, Scheme::Mvi, &params, &ErrorModel::none(), &RunOptions::new(3000)).unwrap();
        let last = t.last();
        assert!(last.q.get(0, 1) < last.q.get(0, 0) - 100.0);
    }

    #[test]
    fn trace_csv_header_and_rows() {
        let mdp = garnet(1);
        let params = TemperatureParams::new(0.03, 0.9, -1.0).unwrap();
        let t = run_scheme(
            &mdp,
            Scheme::Mvi,
            &params,
            &ErrorModel::gaussian(0.1, 1),
            &RunOptions::new(4).tracking(),
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRACE_CSV_HEADER.join(","));
        assert_eq!(lines.count(), 5);
    }
}
