//! Event-driven simulation of one workload: slot arrivals enter the global
//! queue, the dispatcher moves its head into a VM buffer whenever some buffer
//! has room, and finished attempts either complete, requeue or abort.

use std::collections::VecDeque;
use std::fmt::{self, Display};
use std::hash::Hash;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::baselines::SchedError;
use crate::cloud::{
    maybe_fail, Cluster, ClusterError, CompletionRecord, FailureOutcome, Outcome, VmSpec, DEFAULT_MAX_ATTEMPTS,
};
use crate::mdp::{encode_state, reward, LengthBins, SystemState};
use crate::qlearn::{select_action, Environment, Observation, QTable};
use crate::scalar::Scalar;
use crate::workload::{generate_workload, ScenarioConfig, TaskSpec, WorkloadError};

/// Random stream used by simulations and learners.
pub type SimRng = ChaCha8Rng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Schedule(#[from] SchedError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("no decision pending")]
    NoDecision,
}

/// Static parameters of a simulation run.
#[derive(Debug, Clone)]
pub struct SimConfig<T> {
    pub vms: Vec<VmSpec<T>>,
    pub slot_seconds: T,
    pub failure_ratio: f64,
    pub max_attempts: u32,
    /// Re-verify cluster invariants after every event.
    pub check_invariants: bool,
}

impl<T: Scalar> SimConfig<T> {
    /// Homogeneous cluster for `scenario` with every buffer set to `buffer`.
    pub fn from_scenario(scenario: &ScenarioConfig, buffer: usize) -> Self {
        let vms = (0..scenario.num_vms)
            .map(|i| {
                let mut spec = VmSpec::new(i, T::of(scenario.vm_mips), buffer).with_pes(scenario.num_pes);
                spec.ram_mb = scenario.vm_ram_mb;
                spec.bandwidth_mbps = scenario.vm_bandwidth_mbps;
                spec
            })
            .collect();
        Self {
            vms,
            slot_seconds: T::of(scenario.slot_seconds),
            failure_ratio: 0.0,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            check_invariants: cfg!(debug_assertions),
        }
    }

    pub fn with_failure_ratio(mut self, ratio: f64) -> Self {
        self.failure_ratio = ratio;
        self
    }

    pub fn capacities(&self) -> Vec<usize> {
        self.vms.iter().map(|v| v.buffer_capacity).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    task: TaskSpec,
    attempt: u32,
}

/// One workload flowing through a cluster.
#[derive(Debug, Clone)]
pub struct Simulation<T> {
    cfg: SimConfig<T>,
    cluster: Cluster<T>,
    arrivals: VecDeque<TaskSpec>,
    origin_slot: u64,
    global: VecDeque<Pending>,
    records: Vec<CompletionRecord<T>>,
    decisions: u64,
    requeues: u64,
}

impl<T: Scalar> Simulation<T> {
    pub fn new(cfg: SimConfig<T>, workload: &[TaskSpec]) -> Result<Self, SimError> {
        let cluster = Cluster::new(cfg.vms.clone())?;
        let mut arrivals: Vec<TaskSpec> = workload.to_vec();
        arrivals.sort_by_key(|t| (t.arrival_slot, t.id));
        let origin_slot = arrivals.first().map_or(0, |t| t.arrival_slot);
        Ok(Self {
            cfg,
            cluster,
            arrivals: arrivals.into(),
            origin_slot,
            global: VecDeque::new(),
            records: Vec::new(),
            decisions: 0,
            requeues: 0,
        })
    }

    pub fn cluster(&self) -> &Cluster<T> {
        &self.cluster
    }

    pub fn records(&self) -> &[CompletionRecord<T>] {
        &self.records
    }

    pub fn into_records(self) -> Vec<CompletionRecord<T>> {
        self.records
    }

    pub fn decisions(&self) -> u64 {
        self.decisions
    }

    pub fn requeues(&self) -> u64 {
        self.requeues
    }

    pub fn config(&self) -> &SimConfig<T> {
        &self.cfg
    }

    fn arrival_time(&self, slot: u64) -> T {
        T::of_u64(slot - self.origin_slot) * self.cfg.slot_seconds
    }

    /// Head of the global queue if it can be placed right now.
    pub fn pending(&self) -> Option<&TaskSpec> {
        (self.cluster.has_free_buffer()).then(|| self.global.front().map(|p| &p.task)).flatten()
    }

    /// Processes events until a task waits in the global queue while some
    /// buffer has room. Returns `false` once every task has left the system.
    pub fn advance_to_decision(&mut self, rng: &mut SimRng) -> Result<bool, SimError> {
        loop {
            if !self.global.is_empty() && self.cluster.has_free_buffer() {
                return Ok(true);
            }
            let next_arrival = self.arrivals.front().map(|t| self.arrival_time(t.arrival_slot));
            let next_completion = self.cluster.next_completion_time();
            match (next_arrival, next_completion) {
                (None, None) => {
                    debug_assert!(self.global.is_empty());
                    return Ok(false);
                }
                (Some(a), c) if c.is_none_or(|c| a < c) => {
                    self.cluster.advance_clock(a);
                    while let Some(t) = self.arrivals.front() {
                        if self.arrival_time(t.arrival_slot) > a {
                            break;
                        }
                        let task = self.arrivals.pop_front().expect("front exists");
                        self.global.push_back(Pending { task, attempt: 1 });
                    }
                }
                _ => {
                    let finished = self.cluster.advance_to_next_event();
                    for mut rec in finished {
                        match maybe_fail(self.cfg.failure_ratio, rec.attempts, self.cfg.max_attempts, rng) {
                            FailureOutcome::Complete => self.records.push(rec),
                            FailureOutcome::Requeue => {
                                self.requeues += 1;
                                let task = TaskSpec { id: rec.task_id, arrival_slot: 0, length: rec.length };
                                self.global.push_front(Pending { task, attempt: rec.attempts + 1 });
                            }
                            FailureOutcome::Abort => {
                                rec.outcome = Outcome::Aborted;
                                self.records.push(rec);
                            }
                        }
                    }
                }
            }
            if self.cfg.check_invariants {
                self.cluster.check_invariants()?;
            }
        }
    }

    /// Admits the pending task to `vm`.
    pub fn assign(&mut self, vm: usize) -> Result<(), SimError> {
        let p = *self.global.front().ok_or(SimError::NoDecision)?;
        self.cluster.admit_attempt(p.task, vm, p.attempt)?;
        self.global.pop_front();
        self.decisions += 1;
        if self.cfg.check_invariants {
            self.cluster.check_invariants()?;
        }
        Ok(())
    }

    /// Runs the whole workload under `dispatcher`.
    pub fn run<D: Dispatcher<T> + ?Sized>(mut self, dispatcher: &mut D, rng: &mut SimRng) -> Result<Self, SimError> {
        while self.advance_to_decision(rng)? {
            let vm = dispatcher.select(&self.cluster, rng)?;
            self.assign(vm)?;
        }
        Ok(self)
    }
}

/// Picks the VM for the head of the global queue.
pub trait Dispatcher<T: Scalar> {
    fn select(&mut self, cluster: &Cluster<T>, rng: &mut SimRng) -> Result<usize, SchedError>;
}

/// State key and immediate reward a learning dispatcher observes.
pub trait Features<T: Scalar> {
    type State: Clone + Eq + Hash + Ord + Display;

    fn encode(&self, cluster: &Cluster<T>) -> Self::State;
    /// Reward for sending the next task to `vm`, judged before admission.
    fn reward(&self, cluster: &Cluster<T>, vm: usize) -> T;
}

pub fn feasible_vms<T: Scalar>(cluster: &Cluster<T>) -> Vec<usize> {
    (0..cluster.num_vms()).filter(|&k| cluster.vm(k).free() > 0).collect()
}

/// Occupancy plus length classes, rewarded by the queue-length rule.
#[derive(Debug, Clone, Copy, Default)]
pub struct QlFeatures {
    pub bins: LengthBins,
}

impl<T: Scalar> Features<T> for QlFeatures {
    type State = SystemState;

    fn encode(&self, cluster: &Cluster<T>) -> SystemState {
        encode_state(cluster, &self.bins)
    }

    fn reward(&self, cluster: &Cluster<T>, vm: usize) -> T {
        let caps: Vec<usize> = cluster.vms().iter().map(|v| v.spec().buffer_capacity).collect();
        reward(&self.encode(cluster), vm, &caps).expect("dispatchers only choose feasible vms").value()
    }
}

/// Free-buffer vector, the state of the Q-sch baseline.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QschState(pub Vec<usize>);

impl Display for QschState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join("-"))
    }
}

/// Q-sch: free-buffer state, reward `w_b * free fraction - w_w * normalized delay`.
#[derive(Debug, Clone, Copy)]
pub struct QschFeatures<T> {
    pub buffer_weight: T,
    pub delay_weight: T,
}

impl<T: Scalar> Default for QschFeatures<T> {
    fn default() -> Self {
        Self { buffer_weight: T::of(0.5), delay_weight: T::of(0.5) }
    }
}

impl<T: Scalar> QschFeatures<T> {
    /// Queued work of `vm` relative to the most loaded VM, in `[0, 1]`.
    pub fn normalized_delay(cluster: &Cluster<T>, vm: usize) -> T {
        let work: Vec<T> = (0..cluster.num_vms()).map(|k| cluster.pending_work(k)).collect();
        let max = work.iter().copied().fold(T::zero(), T::max);
        if max > T::zero() {
            work[vm] / max
        } else {
            T::zero()
        }
    }
}

impl<T: Scalar> Features<T> for QschFeatures<T> {
    type State = QschState;

    fn encode(&self, cluster: &Cluster<T>) -> QschState {
        QschState(cluster.free())
    }

    fn reward(&self, cluster: &Cluster<T>, vm: usize) -> T {
        let v = cluster.vm(vm);
        let free_fraction = T::of_usize(v.free()) / T::of_usize(v.spec().buffer_capacity);
        self.buffer_weight * free_fraction - self.delay_weight * Self::normalized_delay(cluster, vm)
    }
}

/// Source of episode workloads for training.
#[derive(Debug, Clone)]
pub enum EpisodeSource {
    /// The same workload every episode.
    Fixed(Vec<TaskSpec>),
    /// A fresh synthetic workload per episode, seeded `seed_base + episode`.
    Generated { scenario: ScenarioConfig, seed_base: u64 },
}

impl EpisodeSource {
    pub fn workload(&self, episode: u64) -> Result<Vec<TaskSpec>, WorkloadError> {
        match self {
            Self::Fixed(w) => Ok(w.clone()),
            Self::Generated { scenario, seed_base } => generate_workload(scenario, seed_base.wrapping_add(episode)),
        }
    }
}

/// The simulator as a learning environment: one episode assigns one workload.
#[derive(Debug, Clone)]
pub struct DispatchEnv<T, F> {
    cfg: SimConfig<T>,
    source: EpisodeSource,
    features: F,
    sim: Option<Simulation<T>>,
    live: bool,
}

impl<T: Scalar, F: Features<T>> DispatchEnv<T, F> {
    pub fn new(cfg: SimConfig<T>, source: EpisodeSource, features: F) -> Self {
        Self { cfg, source, features, sim: None, live: false }
    }
}

impl<T: Scalar, F: Features<T>> Environment<T> for DispatchEnv<T, F> {
    type State = F::State;
    type Error = SimError;

    fn reset(&mut self, episode: u64, rng: &mut SimRng) -> Result<(), SimError> {
        let workload = self.source.workload(episode)?;
        let mut sim = Simulation::new(self.cfg.clone(), &workload)?;
        self.live = sim.advance_to_decision(rng)?;
        self.sim = Some(sim);
        Ok(())
    }

    fn observe(&self) -> Option<Observation<F::State>> {
        let sim = self.sim.as_ref().filter(|_| self.live)?;
        Some(Observation { state: self.features.encode(sim.cluster()), feasible: feasible_vms(sim.cluster()) })
    }

    fn step(&mut self, action: usize, rng: &mut SimRng) -> Result<T, SimError> {
        let sim = self.sim.as_mut().ok_or(SimError::NoDecision)?;
        let r = self.features.reward(sim.cluster(), action);
        sim.assign(action)?;
        self.live = sim.advance_to_decision(rng)?;
        Ok(r)
    }

    fn episode_metric(&self) -> Option<f64> {
        let sim = self.sim.as_ref()?;
        let done: Vec<_> = sim.records().iter().filter(|r| r.outcome == Outcome::Completed).collect();
        if done.is_empty() {
            return None;
        }
        let total: T = done.iter().map(|r| r.waiting_time()).sum();
        Some(total.to_f64_lossy() / done.len() as f64)
    }
}

/// Greedy (or epsilon-greedy) dispatch from a learned table.
#[derive(Debug, Clone)]
pub struct LearnedDispatcher<F: Features<T>, T: Scalar> {
    pub table: QTable<F::State, T>,
    pub features: F,
    pub epsilon: T,
}

impl<T: Scalar, F: Features<T>> Dispatcher<T> for LearnedDispatcher<F, T> {
    fn select(&mut self, cluster: &Cluster<T>, rng: &mut SimRng) -> Result<usize, SchedError> {
        let state = self.features.encode(cluster);
        select_action(&state, &feasible_vms(cluster), &self.table, self.epsilon, rng)
            .map_err(|_| SchedError::AllBuffersFull)
    }
}

/// Runs `workload` under `dispatcher` with a stream seeded by `seed`.
pub fn simulate<T: Scalar, D: Dispatcher<T> + ?Sized>(
    cfg: &SimConfig<T>,
    workload: &[TaskSpec],
    dispatcher: &mut D,
    seed: u64,
) -> Result<Simulation<T>, SimError> {
    let mut rng = SimRng::seed_from_u64(seed);
    Simulation::new(cfg.clone(), workload)?.run(dispatcher, &mut rng)
}
