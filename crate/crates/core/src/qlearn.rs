//! Tabular Q-learning: sparse Q-table with visit-count learning rate,
//! epsilon-greedy selection with linear decay, and the episode/cycle loop that
//! stops once the greedy policy is stable or the repeater budget runs out.

use std::collections::HashMap;
use std::fmt::Display;
use std::hash::Hash;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mdp::{argmax_lowest, OracleMdp};
use crate::scalar::Scalar;

/// Exponent of the visit count in the learning rate.
pub const LR_EXPONENT: f64 = 0.65;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QlError {
    #[error("no feasible action: every buffer is full")]
    AllBuffersFull,
    #[error("invalid learner config: {0}")]
    InvalidConfig(String),
}

/// `1 / (1 + visits^exponent)`.
pub fn learning_rate_with<T: Scalar>(visits: u64, exponent: T) -> T {
    T::one() / (T::one() + T::of_u64(visits).powf(exponent))
}

pub fn learning_rate<T: Scalar>(visits: u64) -> T {
    learning_rate_with(visits, T::of(LR_EXPONENT))
}

/// Linear decay `eps0 * (1 - cycle / total_cycles)`, zero past the end.
pub fn decay_epsilon<T: Scalar>(eps0: T, cycle: u64, total_cycles: u64) -> T {
    if total_cycles == 0 || cycle >= total_cycles {
        return T::zero();
    }
    eps0 * (T::one() - T::of_u64(cycle) / T::of_u64(total_cycles))
}

#[derive(Debug, Clone)]
struct StateEntry<T> {
    feasible: Vec<usize>,
    q: Vec<T>,
    visits: Vec<u64>,
}

/// Sparse `(state, action) -> (q, visits)` map; entries appear on first touch
/// with `q = 0` and `visits = 0`.
#[derive(Debug, Clone)]
pub struct QTable<S, T> {
    num_actions: usize,
    entries: HashMap<S, StateEntry<T>>,
    // states written since the last convergence check
    touched: Vec<S>,
}

impl<S, T> QTable<S, T>
where
    S: Clone + Eq + Hash + Ord,
    T: Scalar,
{
    pub fn new(num_actions: usize) -> Self {
        Self { num_actions, entries: HashMap::new(), touched: Vec::new() }
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_states(&self) -> usize {
        self.entries.len()
    }

    pub fn q(&self, s: &S, a: usize) -> T {
        self.entries.get(s).map_or(T::zero(), |e| e.q[a])
    }

    pub fn visits(&self, s: &S, a: usize) -> u64 {
        self.entries.get(s).map_or(0, |e| e.visits[a])
    }

    pub fn set_q(&mut self, s: &S, feasible: &[usize], a: usize, value: T) {
        self.touch(s, feasible).q[a] = value;
    }

    fn touch(&mut self, s: &S, feasible: &[usize]) -> &mut StateEntry<T> {
        let n = self.num_actions;
        self.touched.push(s.clone());
        self.entries.entry(s.clone()).or_insert_with(|| StateEntry {
            feasible: feasible.to_vec(),
            q: vec![T::zero(); n],
            visits: vec![0; n],
        })
    }

    /// Largest q over `feasible`; zero when nothing is feasible.
    pub fn max_q(&self, s: &S, feasible: &[usize]) -> T {
        feasible.iter().map(|&a| self.q(s, a)).reduce(T::max).unwrap_or(T::zero())
    }

    /// Greedy action over `feasible`, lowest index among ties.
    pub fn greedy(&self, s: &S, feasible: &[usize]) -> Option<usize> {
        argmax_lowest(feasible.iter().map(|&a| self.q(s, a))).map(|(i, _)| feasible[i])
    }

    /// Greedy action of every state in the table.
    pub fn greedy_policy(&self) -> HashMap<S, usize> {
        self.entries.iter().filter_map(|(s, e)| self.greedy(s, &e.feasible).map(|a| (s.clone(), a))).collect()
    }

    pub fn max_abs_q(&self) -> T {
        self.entries.values().flat_map(|e| e.q.iter().map(|q| q.abs())).fold(T::zero(), T::max)
    }

    /// Rows `(state, action, q, visits)` sorted by state then action, touched actions only.
    pub fn rows(&self) -> Vec<(S, usize, T, u64)> {
        let mut keys: Vec<&S> = self.entries.keys().collect();
        keys.sort();
        let mut out = Vec::new();
        for s in keys {
            let e = &self.entries[s];
            for &a in &e.feasible {
                out.push((s.clone(), a, e.q[a], e.visits[a]));
            }
        }
        out
    }
}

impl<S, T> QTable<S, T>
where
    S: Clone + Eq + Hash + Ord + Display,
    T: Scalar,
{
    /// CSV snapshot `state,action,q,visits` with the dash-joined state vector.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,action,q,visits\n");
        for (s, a, q, v) in self.rows() {
            out.push_str(&format!("{s},{a},{q},{v}\n"));
        }
        out
    }
}

/// Epsilon-greedy choice among `feasible`; exploitation breaks ties uniformly.
pub fn select_action<S, T, R>(
    state: &S,
    feasible: &[usize],
    table: &QTable<S, T>,
    epsilon: T,
    rng: &mut R,
) -> Result<usize, QlError>
where
    S: Clone + Eq + Hash + Ord,
    T: Scalar,
    R: Rng + ?Sized,
{
    if feasible.is_empty() {
        return Err(QlError::AllBuffersFull);
    }
    let xi = T::of(rng.random::<f64>());
    if xi < epsilon {
        return Ok(*feasible.choose(rng).expect("non-empty"));
    }
    let qs: Vec<T> = feasible.iter().map(|&a| table.q(state, a)).collect();
    let best = qs.iter().copied().reduce(T::max).expect("non-empty");
    let margin = T::epsilon().sqrt() * (T::one() + best.abs());
    let ties: Vec<usize> = feasible.iter().zip(&qs).filter(|(_, q)| **q >= best - margin).map(|(a, _)| *a).collect();
    Ok(*ties.choose(rng).expect("at least the maximum"))
}

/// Successor of an update: a state with its feasible actions, or terminal.
pub type Successor<'a, S> = Option<(&'a S, &'a [usize])>;

/// `q <- (1 - beta) q + beta (r + gamma max_a' q(s', a'))` with `beta` from the
/// visit count, then bumps the visit count. Returns the new value.
#[allow(clippy::too_many_arguments)]
pub fn update_q<S, T>(
    table: &mut QTable<S, T>,
    s: &S,
    feasible: &[usize],
    a: usize,
    reward: T,
    next: Successor<'_, S>,
    gamma: T,
    lr_exponent: T,
) -> T
where
    S: Clone + Eq + Hash + Ord,
    T: Scalar,
{
    let future = next.map_or(T::zero(), |(ns, nf)| table.max_q(ns, nf));
    let target = reward + gamma * future;
    let entry = table.touch(s, feasible);
    let beta = learning_rate_with(entry.visits[a], lr_exponent);
    let updated = (T::one() - beta) * entry.q[a] + beta * target;
    entry.q[a] = updated;
    entry.visits[a] += 1;
    updated
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convergence {
    Continue,
    Stop,
}

/// Cycle counter plus the greedy map seen at the previous check.
#[derive(Debug, Clone)]
pub struct ConvergenceMonitor<S> {
    repeater: u64,
    snapshot: HashMap<S, usize>,
    checked: bool,
}

impl<S> Default for ConvergenceMonitor<S> {
    fn default() -> Self {
        Self { repeater: 0, snapshot: HashMap::new(), checked: false }
    }
}

impl<S: Clone + Eq + Hash + Ord> ConvergenceMonitor<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn repeater(&self) -> u64 {
        self.repeater
    }

    pub fn with_repeater(repeater: u64) -> Self {
        Self { repeater, ..Self::default() }
    }

    /// Stops when the greedy map equals the previous snapshot or the repeater
    /// exceeds `threshold`; otherwise stores the map and counts the cycle.
    ///
    /// Only states written since the previous check can differ from the
    /// snapshot, so those are the only ones compared.
    pub fn check<T: Scalar>(&mut self, table: &mut QTable<S, T>, threshold: u64) -> Convergence {
        if self.repeater > threshold {
            return Convergence::Stop;
        }
        let mut changed = !self.checked;
        for s in std::mem::take(&mut table.touched) {
            let Some(entry) = table.entries.get(&s) else { continue };
            let Some(a) = table.greedy(&s, &entry.feasible) else { continue };
            if self.snapshot.insert(s, a) != Some(a) {
                changed = true;
            }
        }
        self.checked = true;
        if !changed {
            return Convergence::Stop;
        }
        self.repeater += 1;
        Convergence::Continue
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig<T> {
    pub gamma: T,
    pub epsilon0: T,
    pub total_cycles: u64,
    /// Repeater threshold: training stops once more than this many cycles ran.
    pub repeater_max: u64,
    pub lr_exponent: T,
}

impl<T: Scalar> Default for LearnerConfig<T> {
    fn default() -> Self {
        Self {
            gamma: T::of(0.9),
            epsilon0: T::one(),
            total_cycles: 10_000,
            repeater_max: 500,
            lr_exponent: T::of(LR_EXPONENT),
        }
    }
}

impl<T: Scalar> LearnerConfig<T> {
    pub fn validate(&self) -> Result<(), QlError> {
        let bad = |m: &str| Err(QlError::InvalidConfig(m.to_string()));
        if !(self.gamma >= T::zero() && self.gamma < T::one()) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.epsilon0 >= T::zero() && self.epsilon0 <= T::one()) {
            return bad("epsilon0 must lie in [0, 1]");
        }
        if self.total_cycles == 0 || self.repeater_max == 0 {
            return bad("total_cycles and repeater_max must be positive");
        }
        if self.lr_exponent.is_nan() || self.lr_exponent <= T::zero() {
            return bad("lr_exponent must be positive");
        }
        Ok(())
    }
}

/// Decision point exposed by an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<S> {
    pub state: S,
    pub feasible: Vec<usize>,
}

/// Episodic environment driven by the trainer.
pub trait Environment<T: Scalar> {
    type State: Clone + Eq + Hash + Ord;
    type Error;

    /// Starts episode number `episode`.
    fn reset(&mut self, episode: u64, rng: &mut ChaCha8Rng) -> Result<(), Self::Error>;
    /// Current decision point, `None` once the episode is over.
    fn observe(&self) -> Option<Observation<Self::State>>;
    /// Applies `action` at the current decision point and returns its reward.
    fn step(&mut self, action: usize, rng: &mut ChaCha8Rng) -> Result<T, Self::Error>;
    /// Summary statistic of the finished episode (average waiting time for the simulator).
    fn episode_metric(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleStats {
    pub cycle: u64,
    pub epsilon: f64,
    pub steps: u64,
    pub total_reward: f64,
    pub metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S, T> {
    pub table: QTable<S, T>,
    pub policy: HashMap<S, usize>,
    pub cycles: u64,
    pub trace: Vec<CycleStats>,
    /// Largest |q| seen after any update.
    pub max_abs_q: T,
}

/// Runs episodes until the convergence monitor stops or epsilon is exhausted.
pub fn train<T, E>(
    env: &mut E,
    cfg: &LearnerConfig<T>,
    num_actions: usize,
    seed: u64,
) -> Result<TrainOutcome<E::State, T>, E::Error>
where
    T: Scalar,
    E: Environment<T>,
{
    let mut table = QTable::new(num_actions);
    train_into(env, cfg, &mut table, seed).map(|(cycles, trace, max_abs_q)| TrainOutcome {
        policy: table.greedy_policy(),
        table,
        cycles,
        trace,
        max_abs_q,
    })
}

/// [`train`] continuing from an existing table.
pub fn train_into<T, E>(
    env: &mut E,
    cfg: &LearnerConfig<T>,
    table: &mut QTable<E::State, T>,
    seed: u64,
) -> Result<(u64, Vec<CycleStats>, T), E::Error>
where
    T: Scalar,
    E: Environment<T>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut monitor = ConvergenceMonitor::new();
    let mut trace = Vec::new();
    let mut max_abs_q = T::zero();
    let mut cycle = 0u64;
    while cycle < cfg.total_cycles {
        let epsilon = decay_epsilon(cfg.epsilon0, cycle, cfg.total_cycles);
        env.reset(cycle, &mut rng)?;
        let mut steps = 0u64;
        let mut total_reward = T::zero();
        let mut current = env.observe();
        while let Some(obs) = current {
            let action = select_action(&obs.state, &obs.feasible, table, epsilon, &mut rng)
                .expect("environments only expose states with a feasible action");
            let r = env.step(action, &mut rng)?;
            let next = env.observe();
            let q = update_q(
                table,
                &obs.state,
                &obs.feasible,
                action,
                r,
                next.as_ref().map(|o| (&o.state, o.feasible.as_slice())),
                cfg.gamma,
                cfg.lr_exponent,
            );
            max_abs_q = max_abs_q.max(q.abs());
            debug_assert!(q.abs() <= T::one() / (T::one() - cfg.gamma) + T::of(1e-6), "q escaped the reward bound");
            total_reward += r;
            steps += 1;
            current = next;
        }
        trace.push(CycleStats {
            cycle,
            epsilon: epsilon.to_f64_lossy(),
            steps,
            total_reward: total_reward.to_f64_lossy(),
            metric: env.episode_metric(),
        });
        cycle += 1;
        if monitor.check(&mut *table, cfg.repeater_max) == Convergence::Stop {
            break;
        }
    }
    Ok((cycle, trace, max_abs_q))
}

/// Samples an [`OracleMdp`] as an episodic environment of fixed length,
/// starting every episode from the empty state.
#[derive(Debug, Clone)]
pub struct OracleEnv<'a, T> {
    mdp: &'a OracleMdp<T>,
    episode_len: u64,
    state: usize,
    step: u64,
}

impl<'a, T: Scalar> OracleEnv<'a, T> {
    pub fn new(mdp: &'a OracleMdp<T>, episode_len: u64) -> Self {
        Self { mdp, episode_len, state: mdp.empty_state(), step: 0 }
    }
}

impl<T: Scalar> Environment<T> for OracleEnv<'_, T> {
    /// Index into the oracle's state list.
    type State = usize;
    type Error = std::convert::Infallible;

    fn reset(&mut self, _episode: u64, _rng: &mut ChaCha8Rng) -> Result<(), Self::Error> {
        self.state = self.mdp.empty_state();
        self.step = 0;
        Ok(())
    }

    fn observe(&self) -> Option<Observation<usize>> {
        (self.step < self.episode_len)
            .then(|| Observation { state: self.state, feasible: (0..self.mdp.actions(self.state).len()).collect() })
    }

    fn step(&mut self, action: usize, rng: &mut ChaCha8Rng) -> Result<T, Self::Error> {
        let r = self.mdp.reward(self.state, action);
        self.state = self.mdp.sample_next(self.state, action, rng);
        self.step += 1;
        Ok(r)
    }
}
