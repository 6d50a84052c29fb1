//! MDP view of the dispatcher: state encoding with length classes, the
//! queue-length reward, an enumerable oracle MDP and a value-iteration solver.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::cloud::Cluster;
use crate::scalar::Scalar;

/// Default width of one length class in MI.
pub const DEFAULT_RANGE_MI: u64 = 10_000;
/// Default highest length class; 40 classes of 10000 MI cover 400000 MI.
pub const DEFAULT_LENGTH_CAP: usize = 40;
/// Largest oracle state space [`build_oracle_mdp`] will enumerate.
pub const MAX_ORACLE_STATES: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("length range must be positive, got {0}")]
    NonPositiveRange(i64),
    #[error("action {action} infeasible in state {state}")]
    InfeasibleAction { state: String, action: usize },
    #[error("oracle state space of {0} states exceeds the enumeration limit")]
    TooManyStates(usize),
    #[error("invalid oracle parameters: {0}")]
    InvalidParameters(String),
}

/// Maps an assigned-length total to its class, `min(floor(total / range), cap)`.
pub fn discretize_length(total_length: u64, range: i64, cap: usize) -> Result<usize, MdpError> {
    if range <= 0 {
        return Err(MdpError::NonPositiveRange(range));
    }
    let class = total_length / range as u64;
    Ok(usize::try_from(class).map_or(cap, |c| c.min(cap)))
}

/// Length-class discretization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LengthBins {
    range: u64,
    cap: usize,
}

impl LengthBins {
    pub fn new(range: u64, cap: usize) -> Result<Self, MdpError> {
        if range == 0 {
            return Err(MdpError::NonPositiveRange(0));
        }
        Ok(Self { range, cap })
    }

    pub fn range(&self) -> u64 {
        self.range
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn class_of(&self, total_length: u64) -> usize {
        ((total_length / self.range) as usize).min(self.cap)
    }
}

impl Default for LengthBins {
    fn default() -> Self {
        Self { range: DEFAULT_RANGE_MI, cap: DEFAULT_LENGTH_CAP }
    }
}

/// Occupied-buffer counts followed by length classes, one entry per VM each.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SystemState {
    pub b: Vec<usize>,
    pub l: Vec<usize>,
}

impl SystemState {
    pub fn new(b: Vec<usize>, l: Vec<usize>) -> Self {
        debug_assert_eq!(b.len(), l.len());
        Self { b, l }
    }

    pub fn empty(k: usize) -> Self {
        Self { b: vec![0; k], l: vec![0; k] }
    }

    pub fn num_vms(&self) -> usize {
        self.b.len()
    }

    /// `(B_1..B_K, class_1..class_K)`.
    pub fn as_vector(&self) -> Vec<usize> {
        self.b.iter().chain(&self.l).copied().collect()
    }

    pub fn feasible_actions<'a>(&'a self, capacities: &'a [usize]) -> impl Iterator<Item = usize> + 'a {
        (0..self.b.len()).filter(move |&k| self.b[k] < capacities[k])
    }

    /// Relabels VMs: entry `k` of the result is entry `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self { b: perm.iter().map(|&p| self.b[p]).collect(), l: perm.iter().map(|&p| self.l[p]).collect() }
    }
}

impl fmt::Display for SystemState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.as_vector().iter().map(usize::to_string).collect();
        f.write_str(&parts.join("-"))
    }
}

/// Encodes the cluster as `(B, class(L))`.
pub fn encode_state<T: Scalar>(cluster: &Cluster<T>, bins: &LengthBins) -> SystemState {
    SystemState { b: cluster.occupied(), l: cluster.assigned_lengths().into_iter().map(|x| bins.class_of(x)).collect() }
}

/// Immediate reward of one assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reward {
    Penalty,
    Neutral,
    Bonus,
}

impl Reward {
    pub fn as_i8(self) -> i8 {
        match self {
            Self::Penalty => -1,
            Self::Neutral => 0,
            Self::Bonus => 1,
        }
    }

    pub fn value<T: Scalar>(self) -> T {
        T::of(f64::from(self.as_i8()))
    }
}

/// +1 for a least-occupied VM, otherwise -1 for a VM holding the largest
/// length class, otherwise 0. The +1 case is checked first.
pub fn reward(state: &SystemState, action: usize, capacities: &[usize]) -> Result<Reward, MdpError> {
    if action >= state.b.len() || state.b[action] >= capacities[action] {
        return Err(MdpError::InfeasibleAction { state: state.to_string(), action });
    }
    let min_b = *state.b.iter().min().expect("non-empty state");
    let max_l = *state.l.iter().max().expect("non-empty state");
    Ok(if state.b[action] == min_b {
        Reward::Bonus
    } else if state.l[action] == max_l {
        Reward::Penalty
    } else {
        Reward::Neutral
    })
}

/// Action of the oracle MDP. `Defer` is the only action when every buffer is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OracleAction {
    Assign(usize),
    Defer,
}

/// Parameters of the enumerable oracle MDP.
#[derive(Debug, Clone)]
pub struct OracleParams<T> {
    pub num_vms: usize,
    pub buffer: usize,
    /// Number of length classes; classes run `0..length_classes`.
    pub length_classes: usize,
    /// Distribution of the class increment an arriving task adds, over `0..length_classes`.
    pub arrival: Vec<T>,
    /// Per-epoch completion probability of each busy VM.
    pub service_prob: T,
    pub gamma: T,
}

/// Finite MDP over all `(b, l)` states with a sparse, factorized kernel.
///
/// One decision epoch: a task whose class increment is drawn from `arrival`
/// is admitted to the chosen VM (`l' = min(l + u, cap)`), then every VM that
/// was busy when the epoch began finishes one task with probability
/// `service_prob`, shrinking its class to `ceil(l * (b - 1) / b)`.
#[derive(Debug, Clone)]
pub struct OracleMdp<T> {
    params: OracleParams<T>,
    states: Vec<SystemState>,
    actions: Vec<Vec<OracleAction>>,
    rewards: Vec<Vec<T>>,
    kernel: Vec<Vec<Vec<(usize, T)>>>,
}

pub fn build_oracle_mdp<T: Scalar>(params: OracleParams<T>) -> Result<OracleMdp<T>, MdpError> {
    let OracleParams { num_vms: k, buffer: n, length_classes: c, .. } = params;
    if k == 0 || n == 0 || c == 0 {
        return Err(MdpError::InvalidParameters("num_vms, buffer and length_classes must be >= 1".into()));
    }
    if params.arrival.len() != c {
        return Err(MdpError::InvalidParameters(format!(
            "arrival distribution has {} entries, expected {c}",
            params.arrival.len()
        )));
    }
    let total: T = params.arrival.iter().copied().sum();
    if params.arrival.iter().any(|p| *p < T::zero()) || (total - T::one()).abs() > T::of(1e-9) {
        return Err(MdpError::InvalidParameters("arrival distribution is not a probability vector".into()));
    }
    if !(params.service_prob >= T::zero() && params.service_prob <= T::one()) {
        return Err(MdpError::InvalidParameters("service_prob outside [0, 1]".into()));
    }
    if !(params.gamma >= T::zero() && params.gamma < T::one()) {
        return Err(MdpError::InvalidParameters("gamma outside [0, 1)".into()));
    }
    let per_vm = (n + 1).checked_mul(c).ok_or(MdpError::TooManyStates(usize::MAX))?;
    let count = (0..k).try_fold(1usize, |acc, _| acc.checked_mul(per_vm));
    let count = match count {
        Some(x) if x <= MAX_ORACLE_STATES => x,
        Some(x) => return Err(MdpError::TooManyStates(x)),
        None => return Err(MdpError::TooManyStates(usize::MAX)),
    };

    let index = OracleIndex { k, n, c };
    let states: Vec<SystemState> = (0..count).map(|i| index.decode(i)).collect();
    let capacities = vec![n; k];
    let mut actions = Vec::with_capacity(count);
    let mut rewards = Vec::with_capacity(count);
    let mut kernel = Vec::with_capacity(count);
    for s in &states {
        let feasible: Vec<OracleAction> = s.feasible_actions(&capacities).map(OracleAction::Assign).collect();
        let acts = if feasible.is_empty() { vec![OracleAction::Defer] } else { feasible };
        let mut rs = Vec::with_capacity(acts.len());
        let mut rows = Vec::with_capacity(acts.len());
        for &a in &acts {
            rs.push(match a {
                OracleAction::Assign(vm) => reward(s, vm, &capacities)?.value(),
                OracleAction::Defer => T::zero(),
            });
            rows.push(transition_row(&params, &index, s, a));
        }
        actions.push(acts);
        rewards.push(rs);
        kernel.push(rows);
    }
    Ok(OracleMdp { params, states, actions, rewards, kernel })
}

#[derive(Debug, Clone, Copy)]
struct OracleIndex {
    k: usize,
    n: usize,
    c: usize,
}

impl OracleIndex {
    fn encode(&self, s: &SystemState) -> usize {
        let mut idx = 0;
        for v in 0..self.k {
            idx = idx * (self.n + 1) + s.b[v];
        }
        for v in 0..self.k {
            idx = idx * self.c + s.l[v];
        }
        idx
    }

    fn decode(&self, mut idx: usize) -> SystemState {
        let mut l = vec![0; self.k];
        for v in (0..self.k).rev() {
            l[v] = idx % self.c;
            idx /= self.c;
        }
        let mut b = vec![0; self.k];
        for v in (0..self.k).rev() {
            b[v] = idx % (self.n + 1);
            idx /= self.n + 1;
        }
        SystemState { b, l }
    }
}

fn transition_row<T: Scalar>(
    params: &OracleParams<T>,
    index: &OracleIndex,
    s: &SystemState,
    action: OracleAction,
) -> Vec<(usize, T)> {
    let cap = params.length_classes - 1;
    let busy: Vec<usize> = (0..s.num_vms()).filter(|&v| s.b[v] > 0).collect();
    let mut acc: BTreeMap<usize, T> = BTreeMap::new();

    let arrivals: Vec<(usize, T)> = match action {
        OracleAction::Assign(_) => params.arrival.iter().copied().enumerate().filter(|(_, p)| *p > T::zero()).collect(),
        OracleAction::Defer => vec![(0, T::one())],
    };
    for (inc, p_arrival) in arrivals {
        let mut after = s.clone();
        if let OracleAction::Assign(vm) = action {
            after.b[vm] += 1;
            after.l[vm] = (after.l[vm] + inc).min(cap);
        }
        for mask in 0..(1usize << busy.len()) {
            let mut p = p_arrival;
            let mut next = after.clone();
            for (bit, &v) in busy.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    p *= params.service_prob;
                    let b = next.b[v];
                    next.b[v] = b - 1;
                    next.l[v] = (next.l[v] * (b - 1)).div_ceil(b);
                } else {
                    p *= T::one() - params.service_prob;
                }
            }
            if p > T::zero() {
                *acc.entry(index.encode(&next)).or_insert_with(T::zero) += p;
            }
        }
    }
    acc.into_iter().collect()
}

impl<T: Scalar> OracleMdp<T> {
    pub fn params(&self) -> &OracleParams<T> {
        &self.params
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[SystemState] {
        &self.states
    }

    pub fn state(&self, idx: usize) -> &SystemState {
        &self.states[idx]
    }

    pub fn index_of(&self, s: &SystemState) -> usize {
        OracleIndex { k: self.params.num_vms, n: self.params.buffer, c: self.params.length_classes }.encode(s)
    }

    pub fn empty_state(&self) -> usize {
        0
    }

    pub fn actions(&self, s: usize) -> &[OracleAction] {
        &self.actions[s]
    }

    pub fn reward(&self, s: usize, a: usize) -> T {
        self.rewards[s][a]
    }

    /// Sparse kernel row of `(s, a)`: `(next state, probability)` pairs.
    pub fn transitions(&self, s: usize, a: usize) -> &[(usize, T)] {
        &self.kernel[s][a]
    }

    pub fn gamma(&self) -> T {
        self.params.gamma
    }

    /// Copy of this MDP with `c` added to every reward.
    pub fn with_reward_offset(&self, c: T) -> Self {
        let mut out = self.clone();
        out.rewards.iter_mut().flatten().for_each(|r| *r += c);
        out
    }

    /// `R(s,a) + gamma * sum_s' P(s'|s,a) V(s')`.
    pub fn q_value(&self, s: usize, a: usize, values: &[T]) -> T {
        let future: T = self.kernel[s][a].iter().map(|&(n, p)| p * values[n]).sum();
        self.rewards[s][a] + self.params.gamma * future
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let row = &self.kernel[s][a];
        let u = T::of(rng.random::<f64>());
        let mut acc = T::zero();
        for &(n, p) in row {
            acc += p;
            if u < acc {
                return n;
            }
        }
        row.last().map(|&(n, _)| n).expect("kernel rows are non-empty")
    }

    /// States reachable from `start` under some action sequence.
    pub fn reachable_from(&self, start: usize) -> Vec<usize> {
        let mut seen = vec![false; self.states.len()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(s) = queue.pop_front() {
            for row in &self.kernel[s] {
                for &(n, _) in row {
                    if !seen[n] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        (0..self.states.len()).filter(|&s| seen[s]).collect()
    }
}

/// Output of [`value_iteration`].
#[derive(Debug, Clone)]
pub struct ValueIterationResult<T> {
    pub values: Vec<T>,
    /// Index into `OracleMdp::actions(s)` of the chosen action.
    pub policy: Vec<usize>,
    /// Max-norm change of every sweep, in order.
    pub deltas: Vec<T>,
}

impl<T: Scalar> ValueIterationResult<T> {
    pub fn action(&self, mdp: &OracleMdp<T>, s: usize) -> OracleAction {
        mdp.actions(s)[self.policy[s]]
    }

    /// Indices of every action whose Q-value is within `tol` of `V*(s)`.
    pub fn optimal_actions(&self, mdp: &OracleMdp<T>, s: usize, tol: T) -> Vec<usize> {
        (0..mdp.actions(s).len()).filter(|&a| (mdp.q_value(s, a, &self.values) - self.values[s]).abs() <= tol).collect()
    }
}

fn tie_margin<T: Scalar>(best: T) -> T {
    T::epsilon().sqrt() * (T::one() + best.abs())
}

/// Index of the largest entry; entries within a rounding margin of the
/// maximum count as ties and resolve to the lowest index.
pub(crate) fn argmax_lowest<T: Scalar>(values: impl IntoIterator<Item = T>) -> Option<(usize, T)> {
    let values: Vec<T> = values.into_iter().collect();
    let best = values.iter().copied().reduce(T::max)?;
    let margin = tie_margin(best);
    values.iter().position(|&v| v >= best - margin).map(|i| (i, values[i]))
}

/// Repeats the Bellman optimality backup until the max-norm change of a sweep
/// drops below `tol`, then extracts the greedy policy.
pub fn value_iteration<T: Scalar>(mdp: &OracleMdp<T>, tol: T) -> ValueIterationResult<T> {
    let n = mdp.num_states();
    let mut values = vec![T::zero(); n];
    let mut deltas = Vec::new();
    loop {
        let next: Vec<T> = (0..n)
            .map(|s| {
                (0..mdp.actions(s).len())
                    .map(|a| mdp.q_value(s, a, &values))
                    .reduce(T::max)
                    .expect("every state has an action")
            })
            .collect();
        let delta = next.iter().zip(&values).map(|(a, b)| (*a - *b).abs()).fold(T::zero(), T::max);
        values = next;
        deltas.push(delta);
        if delta < tol {
            break;
        }
    }
    let policy = (0..n)
        .map(|s| {
            argmax_lowest((0..mdp.actions(s).len()).map(|a| mdp.q_value(s, a, &values)))
                .expect("every state has an action")
                .0
        })
        .collect();
    ValueIterationResult { values, policy, deltas }
}
