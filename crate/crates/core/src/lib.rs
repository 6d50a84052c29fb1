//! Cloud task-scheduling simulator with a tabular Q-learning dispatcher.
//!
//! Tasks arrive in discrete slots, wait in a global queue and are dispatched
//! into finite per-VM FIFO buffers. The learning dispatcher observes the
//! occupied-buffer counts and discretized assigned lengths of every VM and is
//! compared against Random, FIFO, Mixed, Greedy and Q-sch dispatchers.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the experiment runner uses.

pub mod baselines;
pub mod cloud;
pub mod mdp;
pub mod metrics;
pub mod qlearn;
pub mod runner;
pub mod scalar;
pub mod sim;
pub mod workload;

pub use baselines::{PolicyKind, SchedError};
pub use mdp::{LengthBins, Reward, SystemState};
pub use scalar::Scalar;
pub use workload::{ScenarioConfig, TaskSpec};

pub type Cluster = cloud::Cluster<f64>;
pub type VmSpec = cloud::VmSpec<f64>;
pub type CompletionRecord = cloud::CompletionRecord<f64>;
pub type OracleMdp = mdp::OracleMdp<f64>;
pub type OracleParams = mdp::OracleParams<f64>;
pub type QTable = qlearn::QTable<SystemState, f64>;
pub type QschTable = qlearn::QTable<sim::QschState, f64>;
pub type LearnerConfig = qlearn::LearnerConfig<f64>;
pub type SimConfig = sim::SimConfig<f64>;
pub type Simulation = sim::Simulation<f64>;
pub type MetricsReport = metrics::MetricsReport<f64>;
pub type Aggregate = metrics::Aggregate<f64>;
