//! Experiment driver: config parsing, policy sweeps over seeded replications
//! and CSV report output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::baselines::{Fifo, Greedy, Mixed, PolicyKind, QschDispatcher, RandomPolicy};
use crate::cloud::DEFAULT_MAX_ATTEMPTS;
use crate::mdp::{LengthBins, DEFAULT_LENGTH_CAP, DEFAULT_RANGE_MI};
use crate::metrics::{aggregate, Aggregate, MetricsError, MetricsReport};
use crate::qlearn::{train, CycleStats, LearnerConfig};
use crate::sim::{
    simulate, DispatchEnv, Dispatcher, EpisodeSource, LearnedDispatcher, QlFeatures, QschFeatures, SimConfig, SimError,
};
use crate::workload::{generate_workload, parse_trace, ScenarioConfig, TaskSpec, WorkloadError};

/// Offset between evaluation seeds and the seeds of training workloads.
const TRAINING_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
}

impl ConfigError {
    fn invalid(key: &str, reason: impl Into<String>) -> Self {
        Self::Invalid { key: key.to_string(), reason: reason.into() }
    }

    /// The offending key, when the error is tied to one.
    pub fn key(&self) -> Option<&str> {
        match self {
            Self::Invalid { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scenario: ScenarioConfig,
    #[serde(default)]
    experiment: RawExperiment,
    #[serde(default)]
    learner: RawLearner,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    policies: Option<Vec<String>>,
    task_counts: Option<Vec<usize>>,
    buffer_sizes: Option<Vec<usize>>,
    failure_ratios: Option<Vec<f64>>,
    replications: Option<u64>,
    seed: Option<u64>,
    max_attempts: Option<u32>,
    trace: Option<PathBuf>,
    output: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLearner {
    gamma: Option<f64>,
    epsilon0: Option<f64>,
    total_cycles: Option<u64>,
    repeater_max: Option<u64>,
    lr_exponent: Option<f64>,
    range_mi: Option<u64>,
    length_cap: Option<usize>,
}

/// A fully specified experiment: every combination of policy, task count,
/// buffer size and failure ratio is run for `replications` seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub scenario: ScenarioConfig,
    pub policies: Vec<PolicyKind>,
    pub task_counts: Vec<usize>,
    pub buffer_sizes: Vec<usize>,
    pub failure_ratios: Vec<f64>,
    pub replications: u64,
    /// Replication `i` uses seed `seed + i`.
    pub seed: u64,
    pub max_attempts: u32,
    pub learner: LearnerConfig<f64>,
    pub range_mi: u64,
    pub length_cap: usize,
    /// Evaluate on the first `n` tasks of this trace instead of synthetic workloads.
    pub trace: Option<PathBuf>,
    pub output: PathBuf,
}

impl ExperimentPlan {
    /// Single-point plan over `scenario` with default settings.
    pub fn new(scenario: ScenarioConfig) -> Self {
        Self {
            policies: PolicyKind::ALL.to_vec(),
            task_counts: vec![scenario.num_tasks],
            buffer_sizes: vec![scenario.buffer_max],
            failure_ratios: vec![0.0],
            replications: 20,
            seed: 1,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            learner: LearnerConfig::default(),
            range_mi: DEFAULT_RANGE_MI,
            length_cap: DEFAULT_LENGTH_CAP,
            trace: None,
            output: PathBuf::from("out"),
            scenario,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario.validate().map_err(|e| ConfigError::invalid("scenario", e.to_string()))?;
        let l = &self.learner;
        if !(l.gamma >= 0.0 && l.gamma < 1.0) {
            return Err(ConfigError::invalid("gamma", format!("{} not in [0, 1)", l.gamma)));
        }
        if !(l.epsilon0 >= 0.0 && l.epsilon0 <= 1.0) {
            return Err(ConfigError::invalid("epsilon0", format!("{} not in [0, 1]", l.epsilon0)));
        }
        if l.total_cycles == 0 {
            return Err(ConfigError::invalid("total_cycles", "must be positive"));
        }
        if l.repeater_max == 0 {
            return Err(ConfigError::invalid("repeater_max", "must be positive"));
        }
        if !(l.lr_exponent > 0.0 && l.lr_exponent.is_finite()) {
            return Err(ConfigError::invalid("lr_exponent", "must be positive"));
        }
        if self.range_mi == 0 {
            return Err(ConfigError::invalid("range_mi", "must be positive"));
        }
        if self.policies.is_empty() {
            return Err(ConfigError::invalid("policies", "empty list"));
        }
        if self.task_counts.is_empty() || self.task_counts.contains(&0) {
            return Err(ConfigError::invalid("task_counts", "need at least one positive count"));
        }
        if self.buffer_sizes.is_empty() || self.buffer_sizes.contains(&0) {
            return Err(ConfigError::invalid("buffer_sizes", "need at least one positive size"));
        }
        if self.failure_ratios.is_empty() || self.failure_ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(ConfigError::invalid("failure_ratios", "need at least one ratio in [0, 1)"));
        }
        if self.replications == 0 {
            return Err(ConfigError::invalid("replications", "must be at least 1"));
        }
        if self.max_attempts == 0 {
            return Err(ConfigError::invalid("max_attempts", "must be at least 1"));
        }
        Ok(())
    }

    fn bins(&self) -> LengthBins {
        LengthBins::new(self.range_mi, self.length_cap).expect("validated range")
    }
}

/// Parses a TOML experiment file. Omitted experiment and learner keys take
/// their defaults; unknown keys and out-of-range values are rejected.
pub fn parse_config(text: &str) -> Result<ExperimentPlan, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let mut plan = ExperimentPlan::new(raw.scenario);
    let e = raw.experiment;
    if let Some(names) = e.policies {
        plan.policies = names
            .iter()
            .map(|n| n.parse::<PolicyKind>().map_err(|m| ConfigError::invalid("policies", m)))
            .collect::<Result<_, _>>()?;
    }
    plan.task_counts = e.task_counts.unwrap_or(plan.task_counts);
    plan.buffer_sizes = e.buffer_sizes.unwrap_or(plan.buffer_sizes);
    plan.failure_ratios = e.failure_ratios.unwrap_or(plan.failure_ratios);
    plan.replications = e.replications.unwrap_or(plan.replications);
    plan.seed = e.seed.unwrap_or(plan.seed);
    plan.max_attempts = e.max_attempts.unwrap_or(plan.max_attempts);
    plan.trace = e.trace;
    plan.output = e.output.unwrap_or(plan.output);
    let l = raw.learner;
    let d = LearnerConfig::<f64>::default();
    plan.learner = LearnerConfig {
        gamma: l.gamma.unwrap_or(d.gamma),
        epsilon0: l.epsilon0.unwrap_or(d.epsilon0),
        total_cycles: l.total_cycles.unwrap_or(d.total_cycles),
        repeater_max: l.repeater_max.unwrap_or(d.repeater_max),
        lr_exponent: l.lr_exponent.unwrap_or(d.lr_exponent),
    };
    plan.range_mi = l.range_mi.unwrap_or(plan.range_mi);
    plan.length_cap = l.length_cap.unwrap_or(plan.length_cap);
    plan.validate()?;
    Ok(plan)
}

pub fn load_config(path: &Path) -> Result<ExperimentPlan, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    parse_config(&text)
}

/// One (task count, buffer size, failure ratio) combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub tasks: usize,
    pub buffer: usize,
    pub failure_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub policy: PolicyKind,
    pub seed: u64,
    pub point: SweepPoint,
    pub report: MetricsReport<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub policy: PolicyKind,
    pub point: SweepPoint,
    pub aggregate: Aggregate<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub policy: PolicyKind,
    pub point: SweepPoint,
    pub stats: CycleStats,
}

/// Everything an experiment produces, in output order.
#[derive(Debug, Clone, Default)]
pub struct PlanOutput {
    pub num_vms: usize,
    pub runs: Vec<RunRow>,
    pub summary: Vec<SummaryRow>,
    pub convergence: Vec<TraceRow>,
    /// Q-table CSV per learning policy and sweep point, keyed by file name.
    pub qtables: BTreeMap<String, String>,
}

impl PlanOutput {
    /// Summary row for `policy` at `point`.
    pub fn summary_for(&self, policy: PolicyKind, point: SweepPoint) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.policy == policy && s.point == point)
    }

    /// Per-replication rows for `policy` at `point`, in seed order.
    pub fn runs_for(&self, policy: PolicyKind, point: SweepPoint) -> Vec<&RunRow> {
        self.runs.iter().filter(|r| r.policy == policy && r.point == point).collect()
    }
}

fn sweep_points(plan: &ExperimentPlan) -> Vec<SweepPoint> {
    let mut out = Vec::new();
    for &tasks in &plan.task_counts {
        for &buffer in &plan.buffer_sizes {
            for &failure_ratio in &plan.failure_ratios {
                out.push(SweepPoint { tasks, buffer, failure_ratio });
            }
        }
    }
    out
}

fn load_trace(plan: &ExperimentPlan) -> Result<Option<Vec<TaskSpec>>, RunError> {
    let Some(path) = &plan.trace else { return Ok(None) };
    let text = fs::read_to_string(path).map_err(|source| RunError::Io { path: path.clone(), source })?;
    let mut tasks = parse_trace(&text)?;
    tasks.sort_by_key(|t| (t.arrival_slot, t.id));
    Ok(Some(tasks))
}

fn label(policy: PolicyKind, p: SweepPoint) -> String {
    format!("qtable_{policy}_t{}_b{}_f{}.csv", p.tasks, p.buffer, p.failure_ratio)
}

/// Runs every policy at every sweep point. Learning policies are first
/// trained on fresh synthetic workloads, then evaluated greedily.
pub fn execute(plan: &ExperimentPlan) -> Result<PlanOutput, RunError> {
    plan.validate()?;
    let trace = load_trace(plan)?;
    let bins = plan.bins();
    let mut out = PlanOutput { num_vms: plan.scenario.num_vms, ..PlanOutput::default() };
    for point in sweep_points(plan) {
        let scenario = ScenarioConfig { num_tasks: point.tasks, ..plan.scenario.clone() };
        let mut cfg = SimConfig::<f64>::from_scenario(&scenario, point.buffer).with_failure_ratio(point.failure_ratio);
        cfg.max_attempts = plan.max_attempts;
        let workloads: Vec<Vec<TaskSpec>> = (0..plan.replications)
            .map(|i| match &trace {
                Some(t) => Ok(t.iter().take(point.tasks).copied().collect()),
                None => generate_workload(&scenario, plan.seed.wrapping_add(i)),
            })
            .collect::<Result<_, _>>()?;
        let source = EpisodeSource::Generated {
            scenario: scenario.clone(),
            seed_base: plan.seed.wrapping_add(TRAINING_SEED_OFFSET),
        };
        for &policy in &plan.policies {
            let mut dispatcher: Box<dyn Dispatcher<f64>> = match policy {
                PolicyKind::Random => Box::new(RandomPolicy),
                PolicyKind::Fifo => Box::new(Fifo),
                PolicyKind::Mixed => Box::new(Mixed),
                PolicyKind::Greedy => Box::new(Greedy),
                PolicyKind::Qlearn => {
                    let features = QlFeatures { bins };
                    let mut env = DispatchEnv::new(cfg.clone(), source.clone(), features);
                    let trained = train(&mut env, &plan.learner, scenario.num_vms, plan.seed)?;
                    push_trace(&mut out, policy, point, trained.trace);
                    out.qtables.insert(label(policy, point), trained.table.to_csv());
                    Box::new(LearnedDispatcher { table: trained.table, features, epsilon: 0.0 })
                }
                PolicyKind::Qsch => {
                    let mut env = DispatchEnv::new(cfg.clone(), source.clone(), QschFeatures::default());
                    let trained = train(&mut env, &plan.learner, scenario.num_vms, plan.seed)?;
                    push_trace(&mut out, policy, point, trained.trace);
                    out.qtables.insert(label(policy, point), trained.table.to_csv());
                    Box::new(QschDispatcher { table: trained.table, epsilon: 0.0 })
                }
            };
            let mut reports = Vec::with_capacity(workloads.len());
            for (i, workload) in workloads.iter().enumerate() {
                let seed = plan.seed.wrapping_add(i as u64);
                let sim = simulate(&cfg, workload, dispatcher.as_mut(), seed)?;
                let report = MetricsReport::from_records(sim.records(), &cfg.vms)?;
                out.runs.push(RunRow { policy, seed, point, report: report.clone() });
                reports.push(report);
            }
            out.summary.push(SummaryRow { policy, point, aggregate: aggregate(&reports)? });
        }
    }
    Ok(out)
}

fn push_trace(out: &mut PlanOutput, policy: PolicyKind, point: SweepPoint, trace: Vec<CycleStats>) {
    out.convergence.extend(trace.into_iter().map(|stats| TraceRow { policy, point, stats }));
}

fn metric_columns(num_vms: usize) -> Vec<String> {
    MetricsReport::<f64>::column_names(num_vms).into_iter().skip(1).collect()
}

fn to_csv(header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

impl PlanOutput {
    /// `policy,seed,tasks,<metrics>,aborts,buffer,failure_ratio`; `tasks` is the
    /// workload size, so completed tasks are `tasks - aborts`.
    pub fn runs_csv(&self) -> Result<String, csv::Error> {
        let mut header: Vec<String> = ["policy", "seed", "tasks"].map(String::from).to_vec();
        header.extend(metric_columns(self.num_vms));
        header.extend(["buffer", "failure_ratio"].map(String::from));
        to_csv(
            header,
            self.runs.iter().map(|r| {
                let mut row = vec![r.policy.to_string(), r.seed.to_string(), r.point.tasks.to_string()];
                row.extend(r.report.values().into_iter().skip(1).map(|v| v.to_string()));
                row.extend([r.point.buffer.to_string(), r.point.failure_ratio.to_string()]);
                row
            }),
        )
    }

    /// Mean and standard deviation of every metric per policy and sweep point.
    pub fn summary_csv(&self) -> Result<String, csv::Error> {
        let mut header: Vec<String> =
            ["policy", "tasks", "buffer", "failure_ratio", "replications"].map(String::from).to_vec();
        for c in metric_columns(self.num_vms) {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_sd"));
        }
        to_csv(
            header,
            self.summary.iter().map(|s| {
                let mut row = vec![
                    s.policy.to_string(),
                    s.point.tasks.to_string(),
                    s.point.buffer.to_string(),
                    s.point.failure_ratio.to_string(),
                    s.aggregate.replications.to_string(),
                ];
                for st in &s.aggregate.stats[1..] {
                    row.push(st.mean.to_string());
                    row.push(st.sd.to_string());
                }
                row
            }),
        )
    }

    /// Per training cycle: exploration rate, decisions, reward and average waiting time.
    pub fn convergence_csv(&self) -> Result<String, csv::Error> {
        let header =
            ["policy", "tasks", "buffer", "failure_ratio", "cycle", "epsilon", "steps", "total_reward", "avg_wait_s"]
                .map(String::from)
                .to_vec();
        to_csv(
            header,
            self.convergence.iter().map(|t| {
                vec![
                    t.policy.to_string(),
                    t.point.tasks.to_string(),
                    t.point.buffer.to_string(),
                    t.point.failure_ratio.to_string(),
                    t.stats.cycle.to_string(),
                    t.stats.epsilon.to_string(),
                    t.stats.steps.to_string(),
                    t.stats.total_reward.to_string(),
                    t.stats.metric.map(|m| m.to_string()).unwrap_or_default(),
                ]
            }),
        )
    }

    /// Writes `runs.csv`, `summary.csv`, `convergence.csv` and the Q-tables
    /// under `qtables/`; returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, RunError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| RunError::Io { path, source }
        };
        let csv_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| RunError::Csv { path, source }
        };
        let qdir = dir.join("qtables");
        fs::create_dir_all(&qdir).map_err(io(&qdir))?;
        let mut files = vec![
            (dir.join("runs.csv"), self.runs_csv().map_err(csv_err(&dir.join("runs.csv")))?),
            (dir.join("summary.csv"), self.summary_csv().map_err(csv_err(&dir.join("summary.csv")))?),
            (dir.join("convergence.csv"), self.convergence_csv().map_err(csv_err(&dir.join("convergence.csv")))?),
        ];
        files.extend(self.qtables.iter().map(|(name, body)| (qdir.join(name), body.clone())));
        for (path, body) in &files {
            fs::write(path, body).map_err(io(path))?;
        }
        Ok(files.into_iter().map(|f| f.0).collect())
    }
}

/// Executes `plan` and writes its reports to `plan.output`.
pub fn run_plan(plan: &ExperimentPlan) -> Result<Vec<PathBuf>, RunError> {
    execute(plan)?.write(&plan.output)
}
