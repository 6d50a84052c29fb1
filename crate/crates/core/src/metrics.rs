//! Response time, waiting time, makespan, utilization and load share, plus
//! mean/standard-deviation aggregation over replications.

use thiserror::Error;

use crate::cloud::{CompletionRecord, Outcome, VmSpec};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("metric undefined on an empty record set")]
    Empty,
    #[error("horizon {horizon} shorter than makespan {makespan}")]
    HorizonTooShort { horizon: f64, makespan: f64 },
    #[error("record for task {0} lies on an unknown vm")]
    UnknownVm(u64),
}

fn mean_of<T: Scalar>(
    records: &[CompletionRecord<T>],
    f: impl Fn(&CompletionRecord<T>) -> T,
) -> Result<T, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let total: T = records.iter().map(f).sum();
    Ok(total / T::of_usize(records.len()))
}

/// Mean of `F - S` over the records.
pub fn avg_response_time<T: Scalar>(records: &[CompletionRecord<T>]) -> Result<T, MetricsError> {
    mean_of(records, CompletionRecord::response_time)
}

/// Mean of `F - S - E` over the records.
pub fn avg_waiting_time<T: Scalar>(records: &[CompletionRecord<T>]) -> Result<T, MetricsError> {
    mean_of(records, CompletionRecord::waiting_time)
}

/// Latest finish time; the clock starts at the first arrival.
pub fn makespan<T: Scalar>(records: &[CompletionRecord<T>]) -> Result<T, MetricsError> {
    records.iter().map(|r| r.finished_at).reduce(T::max).ok_or(MetricsError::Empty)
}

/// Per-VM `(utilization, load share)`. Utilization is busy PE-seconds over
/// `horizon * pes`; load share is the VM's fraction of the executed MI.
pub fn utilization_and_load<T: Scalar>(
    records: &[CompletionRecord<T>],
    horizon: T,
    vms: &[VmSpec<T>],
) -> Result<Vec<(T, T)>, MetricsError> {
    if let Ok(m) = makespan(records) {
        if horizon < m {
            return Err(MetricsError::HorizonTooShort { horizon: horizon.to_f64_lossy(), makespan: m.to_f64_lossy() });
        }
    }
    let mut busy = vec![T::zero(); vms.len()];
    let mut mi = vec![0u64; vms.len()];
    for r in records {
        let k = r.vm_index;
        if k >= vms.len() {
            return Err(MetricsError::UnknownVm(r.task_id));
        }
        busy[k] += r.execution;
        mi[k] += r.length;
    }
    let total_mi: u64 = mi.iter().sum();
    Ok(vms
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let util = if horizon > T::zero() { busy[k] / (horizon * T::of_usize(spec.pes)) } else { T::zero() };
            let share = if total_mi > 0 { T::of_u64(mi[k]) / T::of_u64(total_mi) } else { T::zero() };
            (util, share)
        })
        .collect())
}

/// Metrics of one simulation run. Aborted tasks only count in `abort_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport<T> {
    pub avg_response_s: T,
    pub avg_wait_s: T,
    pub makespan_s: T,
    pub utilization: Vec<T>,
    pub load_share: Vec<T>,
    pub task_count: usize,
    pub abort_count: usize,
}

impl<T: Scalar> MetricsReport<T> {
    /// Report over the completed records with the makespan as horizon.
    pub fn from_records(records: &[CompletionRecord<T>], vms: &[VmSpec<T>]) -> Result<Self, MetricsError> {
        let done: Vec<CompletionRecord<T>> =
            records.iter().filter(|r| r.outcome == Outcome::Completed).cloned().collect();
        let abort_count = records.len() - done.len();
        let makespan_s = makespan(&done)?;
        let per_vm = utilization_and_load(&done, makespan_s, vms)?;
        Ok(Self {
            avg_response_s: avg_response_time(&done)?,
            avg_wait_s: avg_waiting_time(&done)?,
            makespan_s,
            utilization: per_vm.iter().map(|p| p.0).collect(),
            load_share: per_vm.iter().map(|p| p.1).collect(),
            task_count: done.len(),
            abort_count,
        })
    }

    /// Flat metric vector in CSV column order (after policy and seed).
    pub fn values(&self) -> Vec<T> {
        let mut v = vec![T::of_usize(self.task_count), self.avg_response_s, self.avg_wait_s, self.makespan_s];
        v.extend(&self.utilization);
        v.extend(&self.load_share);
        v.push(T::of_usize(self.abort_count));
        v
    }

    pub fn column_names(num_vms: usize) -> Vec<String> {
        let mut cols: Vec<String> = ["tasks", "avg_response_s", "avg_wait_s", "makespan_s"].map(String::from).to_vec();
        cols.extend((0..num_vms).map(|k| format!("util_vm{k}")));
        cols.extend((0..num_vms).map(|k| format!("load_vm{k}")));
        cols.push("aborts".into());
        cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat<T> {
    pub mean: T,
    pub sd: T,
}

/// Element-wise statistics over replications, in [`MetricsReport::values`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate<T> {
    pub replications: usize,
    pub stats: Vec<Stat<T>>,
}

impl<T: Scalar> Aggregate<T> {
    pub fn avg_response(&self) -> Stat<T> {
        self.stats[1]
    }

    pub fn avg_wait(&self) -> Stat<T> {
        self.stats[2]
    }

    pub fn makespan(&self) -> Stat<T> {
        self.stats[3]
    }

    /// Standard error of the mean of metric `i`.
    pub fn std_error(&self, i: usize) -> T {
        self.stats[i].sd / T::of_usize(self.replications).sqrt()
    }
}

/// Sample mean and (n-1)-denominator standard deviation per metric; a single
/// report has zero deviation.
pub fn aggregate<T: Scalar>(reports: &[MetricsReport<T>]) -> Result<Aggregate<T>, MetricsError> {
    let first = reports.first().ok_or(MetricsError::Empty)?;
    let rows: Vec<Vec<T>> = reports.iter().map(MetricsReport::values).collect();
    let width = first.values().len();
    let n = T::of_usize(reports.len());
    let stats = (0..width)
        .map(|i| {
            let mean = rows.iter().map(|r| r[i]).sum::<T>() / n;
            let sd = if reports.len() > 1 {
                let ss: T = rows.iter().map(|r| (r[i] - mean).powi(2)).sum();
                (ss / (n - T::one())).sqrt()
            } else {
                T::zero()
            };
            Stat { mean, sd }
        })
        .collect();
    Ok(Aggregate { replications: reports.len(), stats })
}
