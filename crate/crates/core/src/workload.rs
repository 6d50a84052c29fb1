//! Task streams: CSV traces, synthetic scenario workloads and the per-slot
//! arrival process.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Header written by [`write_trace`].
pub const TRACE_HEADER: &str = "id,arrival_slot,length_mi";

/// Largest number of arrivals in one slot for the default arrival model.
pub const DEFAULT_MAX_ARRIVALS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("malformed {field} at line {line}: {value:?}")]
    Malformed { line: usize, field: &'static str, value: String },
    #[error("expected 3 fields at line {line}, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("non-positive length at line {line}")]
    NonPositiveLength { line: usize },
    #[error("duplicate id {id} at line {line}")]
    DuplicateId { line: usize, id: u64 },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid arrival model: {0}")]
    InvalidArrivalModel(String),
    #[error("arrival count {count} outside support 0..={max}")]
    OutOfSupport { count: usize, max: usize },
}

/// One task: identifier, arrival slot and length in million instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: u64,
    pub arrival_slot: u64,
    pub length: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalMode {
    Iid,
    Markov,
}

/// Workload and datacenter parameters for one experiment scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_tasks: usize,
    pub length_min: u64,
    pub length_max: u64,
    pub num_vms: usize,
    pub vm_mips: f64,
    pub vm_ram_mb: u64,
    pub vm_bandwidth_mbps: u64,
    pub buffer_min: usize,
    pub buffer_max: usize,
    pub num_pes: usize,
    pub num_datacenters: usize,
    pub num_hosts: usize,
    pub arrival_mode: ArrivalMode,
    /// Mean number of arriving tasks per slot.
    pub arrival_mean: f64,
    /// Wall-clock duration of one decision slot.
    pub slot_seconds: f64,
}

impl ScenarioConfig {
    /// Lightweight scenario: 20 tasks of 5000-200000 MI on 3 single-PE VMs.
    pub fn scenario1() -> Self {
        Self {
            num_tasks: 20,
            length_min: 5_000,
            length_max: 200_000,
            num_vms: 3,
            vm_mips: 1000.0,
            vm_ram_mb: 1740,
            vm_bandwidth_mbps: 1000,
            buffer_min: 5,
            buffer_max: 15,
            num_pes: 1,
            num_datacenters: 1,
            num_hosts: 1,
            arrival_mode: ArrivalMode::Iid,
            arrival_mean: 1.0,
            slot_seconds: 30.0,
        }
    }

    /// Heavy scenario: 100 tasks of 100-400000 MI on 3 VMs with 5 PEs each.
    pub fn scenario2() -> Self {
        Self {
            num_tasks: 100,
            length_min: 100,
            length_max: 400_000,
            buffer_min: 5,
            buffer_max: 50,
            num_pes: 5,
            num_hosts: 2,
            slot_seconds: 15.0,
            ..Self::scenario1()
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |msg: &str| Err(WorkloadError::InvalidScenario(msg.to_string()));
        if self.num_tasks == 0 {
            return bad("num_tasks must be at least 1");
        }
        if self.length_min == 0 || self.length_min > self.length_max {
            return bad("require 0 < length_min <= length_max");
        }
        if self.num_vms == 0 || self.num_pes == 0 || self.num_datacenters == 0 || self.num_hosts == 0 {
            return bad("num_vms, num_pes, num_datacenters and num_hosts must be at least 1");
        }
        if self.buffer_min == 0 || self.buffer_min > self.buffer_max {
            return bad("require 1 <= buffer_min <= buffer_max");
        }
        if !(self.vm_mips.is_finite() && self.vm_mips > 0.0) {
            return bad("vm_mips must be positive");
        }
        if !(self.slot_seconds.is_finite() && self.slot_seconds > 0.0) {
            return bad("slot_seconds must be positive");
        }
        let max = DEFAULT_MAX_ARRIVALS as f64;
        if !(self.arrival_mean > 0.0 && self.arrival_mean <= max) {
            return bad("arrival_mean must lie in (0, 5]");
        }
        Ok(())
    }

    /// Arrival model implied by `arrival_mode` and `arrival_mean`.
    pub fn arrival_model(&self) -> Result<ArrivalModel, WorkloadError> {
        match self.arrival_mode {
            ArrivalMode::Iid => ArrivalModel::binomial_iid(DEFAULT_MAX_ARRIVALS, self.arrival_mean),
            ArrivalMode::Markov => ArrivalModel::sticky_markov(DEFAULT_MAX_ARRIVALS, self.arrival_mean, 0.5),
        }
    }

    pub fn mean_length(&self) -> f64 {
        (self.length_min + self.length_max) as f64 / 2.0
    }
}

/// Distribution of the number of tasks arriving in a slot, over `0..=max_count`.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalModel {
    /// Each slot draws independently from one probability vector.
    Iid(Vec<f64>),
    /// Row `i` is the distribution of the next count given the previous count `i`.
    Markov(Vec<Vec<f64>>),
}

fn check_row(row: &[f64], width: usize) -> Result<(), WorkloadError> {
    if row.len() != width {
        return Err(WorkloadError::InvalidArrivalModel(format!("row has {} entries, expected {width}", row.len())));
    }
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(WorkloadError::InvalidArrivalModel("probability outside [0, 1]".into()));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(WorkloadError::InvalidArrivalModel(format!("row sums to {total}")));
    }
    Ok(())
}

impl ArrivalModel {
    pub fn iid(dist: Vec<f64>) -> Result<Self, WorkloadError> {
        if dist.is_empty() {
            return Err(WorkloadError::InvalidArrivalModel("empty support".into()));
        }
        check_row(&dist, dist.len())?;
        Ok(Self::Iid(dist))
    }

    pub fn markov(matrix: Vec<Vec<f64>>) -> Result<Self, WorkloadError> {
        if matrix.is_empty() {
            return Err(WorkloadError::InvalidArrivalModel("empty support".into()));
        }
        for row in &matrix {
            check_row(row, matrix.len())?;
        }
        Ok(Self::Markov(matrix))
    }

    /// Binomial(max_count, mean / max_count): support `0..=max_count` with the exact mean.
    pub fn binomial_iid(max_count: usize, mean: f64) -> Result<Self, WorkloadError> {
        Self::iid(binomial_pmf(max_count, mean)?)
    }

    /// Markov chain that repeats the previous count with probability `stay`,
    /// otherwise redraws from the binomial marginal; stationary law is that marginal.
    pub fn sticky_markov(max_count: usize, mean: f64, stay: f64) -> Result<Self, WorkloadError> {
        if !(0.0..=1.0).contains(&stay) {
            return Err(WorkloadError::InvalidArrivalModel("stay probability outside [0, 1]".into()));
        }
        let marginal = binomial_pmf(max_count, mean)?;
        let matrix = (0..=max_count)
            .map(|i| {
                marginal.iter().enumerate().map(|(j, p)| (1.0 - stay) * p + if i == j { stay } else { 0.0 }).collect()
            })
            .collect();
        Self::markov(matrix)
    }

    /// Largest count in the support.
    pub fn max_count(&self) -> usize {
        match self {
            Self::Iid(d) => d.len() - 1,
            Self::Markov(m) => m.len() - 1,
        }
    }

    /// Distribution of the next count after `prev_count`.
    pub fn row(&self, prev_count: usize) -> Result<&[f64], WorkloadError> {
        let max = self.max_count();
        if prev_count > max {
            return Err(WorkloadError::OutOfSupport { count: prev_count, max });
        }
        Ok(match self {
            Self::Iid(d) => d,
            Self::Markov(m) => &m[prev_count],
        })
    }
}

fn binomial_pmf(n: usize, mean: f64) -> Result<Vec<f64>, WorkloadError> {
    if n == 0 || !(0.0..=n as f64).contains(&mean) {
        return Err(WorkloadError::InvalidArrivalModel(format!("mean {mean} not attainable on 0..={n}")));
    }
    let p = mean / n as f64;
    let mut pmf = Vec::with_capacity(n + 1);
    let mut coeff = 1.0;
    for k in 0..=n {
        if k > 0 {
            coeff = coeff * (n - k + 1) as f64 / k as f64;
        }
        pmf.push(coeff * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32));
    }
    let total: f64 = pmf.iter().sum();
    pmf.iter_mut().for_each(|x| *x /= total);
    Ok(pmf)
}

/// Draws the number of tasks arriving in the next slot.
pub fn sample_arrivals<R: Rng + ?Sized>(
    model: &ArrivalModel,
    prev_count: usize,
    rng: &mut R,
) -> Result<usize, WorkloadError> {
    let row = model.row(prev_count)?;
    Ok(sample_categorical(row, rng))
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final partial sum; take the last non-zero entry
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Synthesizes `cfg.num_tasks` tasks with uniform lengths and slot arrivals
/// drawn from the scenario's arrival model. Pure in `(cfg, seed)`.
pub fn generate_workload(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<TaskSpec>, WorkloadError> {
    cfg.validate()?;
    let model = cfg.arrival_model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    let mut prev = 0usize;
    let mut slot = 0u64;
    while tasks.len() < cfg.num_tasks {
        let count = sample_arrivals(&model, prev, &mut rng)?;
        prev = count;
        for _ in 0..count.min(cfg.num_tasks - tasks.len()) {
            let length = rng.random_range(cfg.length_min..=cfg.length_max);
            tasks.push(TaskSpec { id: tasks.len() as u64, arrival_slot: slot, length });
        }
        slot += 1;
    }
    Ok(tasks)
}

/// Parses a `id,arrival_slot,length_mi` trace. A non-numeric first line is a header.
pub fn parse_trace(raw: &str) -> Result<Vec<TaskSpec>, WorkloadError> {
    let mut tasks = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in raw.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if idx == 0 && fields[0].parse::<i64>().is_err() {
            continue;
        }
        if fields.len() != 3 {
            return Err(WorkloadError::FieldCount { line: lineno, found: fields.len() });
        }
        let malformed = |field, value: &str| WorkloadError::Malformed { line: lineno, field, value: value.to_string() };
        let id: u64 = fields[0].parse().map_err(|_| malformed("id", fields[0]))?;
        let arrival_slot: u64 = fields[1].parse().map_err(|_| malformed("arrival_slot", fields[1]))?;
        let length: i64 = fields[2].parse().map_err(|_| malformed("length_mi", fields[2]))?;
        if length <= 0 {
            return Err(WorkloadError::NonPositiveLength { line: lineno });
        }
        if !seen.insert(id) {
            return Err(WorkloadError::DuplicateId { line: lineno, id });
        }
        tasks.push(TaskSpec { id, arrival_slot, length: length as u64 });
    }
    Ok(tasks)
}

/// Serializes tasks in the format read by [`parse_trace`], header included.
pub fn write_trace(tasks: &[TaskSpec]) -> String {
    let mut out = String::with_capacity(16 * (tasks.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for t in tasks {
        let _ = writeln!(out, "{},{},{}", t.id, t.arrival_slot, t.length);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_line() {
        let tasks = parse_trace("1,0,5000").unwrap();
        assert_eq!(tasks, vec![TaskSpec { id: 1, arrival_slot: 0, length: 5000 }]);
    }

    #[test]
    fn empty_stream_is_empty_workload() {
        assert!(parse_trace("").unwrap().is_empty());
    }

    #[test]
    fn negative_length_names_the_line() {
        let err = parse_trace("2,0,-7").unwrap_err();
        assert_eq!(err, WorkloadError::NonPositiveLength { line: 1 });
        assert_eq!(err.to_string(), "non-positive length at line 1");
    }

    #[test]
    fn header_is_skipped_and_errors_count_physical_lines() {
        let raw = "id,arrival_slot,length_mi\n0,0,10\n1,0,x\n";
        assert_eq!(
            parse_trace(raw).unwrap_err(),
            WorkloadError::Malformed { line: 3, field: "length_mi", value: "x".into() }
        );
        let raw = "id,arrival_slot,length_mi\n0,0,10\n0,1,10\n";
        assert_eq!(parse_trace(raw).unwrap_err(), WorkloadError::DuplicateId { line: 3, id: 0 });
        assert_eq!(parse_trace("0,0\n").unwrap_err(), WorkloadError::FieldCount { line: 1, found: 2 });
    }

    #[test]
    fn zero_length_rejected() {
        assert_eq!(parse_trace("0,0,0").unwrap_err(), WorkloadError::NonPositiveLength { line: 1 });
    }

    #[test]
    fn scenario_lengths_in_range() {
        let s1 = generate_workload(&ScenarioConfig::scenario1(), 7).unwrap();
        assert_eq!(s1.len(), 20);
        assert!(s1.iter().all(|t| (5_000..=200_000).contains(&t.length)));
        let s2 = generate_workload(&ScenarioConfig::scenario2(), 7).unwrap();
        assert_eq!(s2.len(), 100);
        assert!(s2.iter().all(|t| (100..=400_000).contains(&t.length)));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = ScenarioConfig::scenario2();
        assert_eq!(generate_workload(&cfg, 42).unwrap(), generate_workload(&cfg, 42).unwrap());
        assert_ne!(generate_workload(&cfg, 42).unwrap(), generate_workload(&cfg, 43).unwrap());
    }

    #[test]
    fn generated_arrivals_are_sorted_by_id() {
        let tasks = generate_workload(&ScenarioConfig::scenario2(), 3).unwrap();
        assert!(tasks.windows(2).all(|w| w[0].arrival_slot <= w[1].arrival_slot && w[0].id < w[1].id));
    }

    #[test]
    fn degenerate_and_absorbing_arrivals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let point = ArrivalModel::iid(vec![1.0, 0.0, 0.0]).unwrap();
        assert!((0..1000).all(|_| sample_arrivals(&point, 0, &mut rng).unwrap() == 0));
        let identity: Vec<Vec<f64>> =
            (0..5).map(|i| (0..5).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let chain = ArrivalModel::markov(identity).unwrap();
        assert!((0..1000).all(|_| sample_arrivals(&chain, 3, &mut rng).unwrap() == 3));
    }

    #[test]
    fn uniform_iid_mean_matches() {
        let model = ArrivalModel::iid(vec![1.0 / 3.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let total: usize = (0..n).map(|_| sample_arrivals(&model, 0, &mut rng).unwrap()).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn prev_count_outside_support() {
        let model = ArrivalModel::iid(vec![0.5, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_arrivals(&model, 2, &mut rng).unwrap_err(), WorkloadError::OutOfSupport { count: 2, max: 1 });
    }

    #[test]
    fn rows_must_be_stochastic() {
        assert!(ArrivalModel::iid(vec![0.5, 0.6]).is_err());
        assert!(ArrivalModel::iid(vec![1.5, -0.5]).is_err());
        assert!(ArrivalModel::markov(vec![vec![1.0, 0.0], vec![0.3]]).is_err());
    }

    #[test]
    fn default_model_has_requested_mean() {
        let model = ScenarioConfig::scenario1().arrival_model().unwrap();
        let row = model.row(0).unwrap();
        assert_eq!(row.len(), DEFAULT_MAX_ARRIVALS + 1);
        let mean: f64 = row.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        assert!((mean - 1.0).abs() < 1e-12);
        let sticky = ArrivalModel::sticky_markov(5, 1.0, 0.5).unwrap();
        for i in 0..=5 {
            let s: f64 = sticky.row(i).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_scenarios() {
        let mut cfg = ScenarioConfig::scenario1();
        cfg.length_min = 300_000;
        assert!(generate_workload(&cfg, 0).is_err());
        let mut cfg = ScenarioConfig::scenario1();
        cfg.buffer_max = 2;
        assert!(cfg.validate().is_err());
    }
}
