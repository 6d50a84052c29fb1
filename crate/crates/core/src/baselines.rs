//! Comparison policies: Random, FIFO, Mixed, Greedy and the Q-sch learner.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use thiserror::Error;

use crate::cloud::Cluster;
use crate::qlearn::QTable;
use crate::scalar::Scalar;
use crate::sim::{feasible_vms, Dispatcher, Features, QschFeatures, QschState, SimRng};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum SchedError {
    /// Every buffer is full; the task stays in the global queue.
    #[error("all buffers full, task deferred")]
    AllBuffersFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    Random,
    Fifo,
    Mixed,
    Greedy,
    Qsch,
    Qlearn,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [Self::Qlearn, Self::Random, Self::Fifo, Self::Mixed, Self::Greedy, Self::Qsch];

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Fifo => "fifo",
            Self::Mixed => "mixed",
            Self::Greedy => "greedy",
            Self::Qsch => "qsch",
            Self::Qlearn => "qlearn",
        }
    }

    pub fn is_learning(self) -> bool {
        matches!(self, Self::Qsch | Self::Qlearn)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|p| p.name().eq_ignore_ascii_case(s)).ok_or_else(|| format!("unknown policy {s:?}"))
    }
}

fn require_space<T: Scalar>(cluster: &Cluster<T>) -> Result<Vec<usize>, SchedError> {
    let feasible = feasible_vms(cluster);
    if feasible.is_empty() {
        Err(SchedError::AllBuffersFull)
    } else {
        Ok(feasible)
    }
}

/// Uniform draw over all VMs; a full draw is redrawn over the VMs with room.
pub fn random_select<T: Scalar, R: Rng + ?Sized>(cluster: &Cluster<T>, rng: &mut R) -> Result<usize, SchedError> {
    let feasible = require_space(cluster)?;
    let k = rng.random_range(0..cluster.num_vms());
    if cluster.vm(k).free() > 0 {
        Ok(k)
    } else {
        Ok(*feasible.choose(rng).expect("non-empty"))
    }
}

/// VM whose next PE frees up earliest, lowest index on ties, skipping full buffers.
pub fn fifo_select<T: Scalar>(cluster: &Cluster<T>) -> Result<usize, SchedError> {
    let feasible = require_space(cluster)?;
    let mut best = feasible[0];
    for &k in &feasible[1..] {
        if cluster.busy_until(k) < cluster.busy_until(best) {
            best = k;
        }
    }
    Ok(best)
}

fn most_free<T: Scalar>(cluster: &Cluster<T>) -> usize {
    let free = cluster.free();
    let max = *free.iter().max().expect("non-empty cluster");
    free.iter().position(|&f| f == max).expect("max is present")
}

/// Uniform draw, reassigned to the most-free VM unless the draw already ties it.
pub fn mixed_select<T: Scalar, R: Rng + ?Sized>(cluster: &Cluster<T>, rng: &mut R) -> Result<usize, SchedError> {
    require_space(cluster)?;
    let k = rng.random_range(0..cluster.num_vms());
    let max = cluster.free().into_iter().max().expect("non-empty cluster");
    Ok(if cluster.vm(k).free() == max { k } else { most_free(cluster) })
}

/// Most free buffer slots, lowest index on ties.
pub fn greedy_select<T: Scalar>(cluster: &Cluster<T>) -> Result<usize, SchedError> {
    require_space(cluster)?;
    Ok(most_free(cluster))
}

/// Q-sch choice: epsilon-greedy over a table keyed by the free-buffer
/// vector; exploitation takes the lowest index among equal values.
pub fn qsch_agent<T: Scalar, R: Rng + ?Sized>(
    cluster: &Cluster<T>,
    table: &QTable<QschState, T>,
    epsilon: T,
    rng: &mut R,
) -> Result<usize, SchedError> {
    let feasible = require_space(cluster)?;
    let state = QschFeatures::<T>::default().encode(cluster);
    if T::of(rng.random::<f64>()) < epsilon {
        return Ok(*feasible.choose(rng).expect("non-empty"));
    }
    Ok(table.greedy(&state, &feasible).expect("non-empty"))
}

/// Dispatches with a trained Q-sch table.
#[derive(Debug, Clone)]
pub struct QschDispatcher<T: Scalar> {
    pub table: QTable<QschState, T>,
    pub epsilon: T,
}

impl<T: Scalar> Dispatcher<T> for QschDispatcher<T> {
    fn select(&mut self, cluster: &Cluster<T>, rng: &mut SimRng) -> Result<usize, SchedError> {
        qsch_agent(cluster, &self.table, self.epsilon, rng)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

#[derive(Debug, Clone, Copy, Default)]
pub struct Fifo;

#[derive(Debug, Clone, Copy, Default)]
pub struct Mixed;

#[derive(Debug, Clone, Copy, Default)]
pub struct Greedy;

impl<T: Scalar> Dispatcher<T> for RandomPolicy {
    fn select(&mut self, cluster: &Cluster<T>, rng: &mut SimRng) -> Result<usize, SchedError> {
        random_select(cluster, rng)
    }
}

impl<T: Scalar> Dispatcher<T> for Fifo {
    fn select(&mut self, cluster: &Cluster<T>, _rng: &mut SimRng) -> Result<usize, SchedError> {
        fifo_select(cluster)
    }
}

impl<T: Scalar> Dispatcher<T> for Mixed {
    fn select(&mut self, cluster: &Cluster<T>, rng: &mut SimRng) -> Result<usize, SchedError> {
        mixed_select(cluster, rng)
    }
}

impl<T: Scalar> Dispatcher<T> for Greedy {
    fn select(&mut self, cluster: &Cluster<T>, _rng: &mut SimRng) -> Result<usize, SchedError> {
        greedy_select(cluster)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::TaskSpec;
    use rand::SeedableRng;

    /// Cluster of `free.len()` VMs with capacity `cap` and the given free counts.
    fn with_free(cap: usize, free: &[usize]) -> Cluster<f64> {
        let mut c = Cluster::homogeneous(free.len(), 1000.0, cap, 1).unwrap();
        let mut id = 0;
        for (k, f) in free.iter().enumerate() {
            for _ in 0..cap - f {
                c.admit(TaskSpec { id, arrival_slot: 0, length: 1000 }, k).unwrap();
                id += 1;
            }
        }
        c
    }

    #[test]
    fn policy_names_round_trip() {
        for p in PolicyKind::ALL {
            assert_eq!(p.name().parse::<PolicyKind>(), Ok(p));
        }
        assert!("fastest".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn single_vm_always_zero() {
        let c = with_free(5, &[3]);
        let mut rng = SimRng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(random_select(&c, &mut rng), Ok(0));
            assert_eq!(mixed_select(&c, &mut rng), Ok(0));
        }
    }

    #[test]
    fn everything_full_defers() {
        let c = with_free(2, &[0, 0, 0]);
        let mut rng = SimRng::seed_from_u64(0);
        assert_eq!(random_select(&c, &mut rng), Err(SchedError::AllBuffersFull));
        assert_eq!(fifo_select(&c), Err(SchedError::AllBuffersFull));
        assert_eq!(mixed_select(&c, &mut rng), Err(SchedError::AllBuffersFull));
        assert_eq!(greedy_select(&c), Err(SchedError::AllBuffersFull));
        assert_eq!(qsch_agent(&c, &QTable::new(3), 0.0, &mut rng), Err(SchedError::AllBuffersFull));
    }

    #[test]
    fn random_is_uniform() {
        let c = with_free(5, &[5, 5, 5]);
        let mut rng = SimRng::seed_from_u64(3);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[random_select(&c, &mut rng).unwrap()] += 1;
        }
        for ct in counts {
            assert!((ct as f64 / n as f64 - 1.0 / 3.0).abs() <= 0.01);
        }
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_select(&with_free(5, &[1, 5, 2])), Ok(1));
        assert_eq!(greedy_select(&with_free(5, &[4, 4, 4])), Ok(0));
        assert_eq!(greedy_select(&with_free(5, &[0, 0, 1])), Ok(2));
    }

    #[test]
    fn mixed_examples() {
        let mut rng = SimRng::seed_from_u64(9);
        let c = with_free(5, &[1, 5, 2]);
        assert!((0..200).all(|_| mixed_select(&c, &mut rng) == Ok(1)));
        let c = with_free(3, &[0, 3, 3]);
        let picks: Vec<usize> = (0..300).map(|_| mixed_select(&c, &mut rng).unwrap()).collect();
        assert!(picks.iter().all(|&p| p == 1 || p == 2));
        // a draw on vm 2 ties the maximum and stays there
        assert!(picks.contains(&2));
    }

    #[test]
    fn fifo_examples() {
        let c = Cluster::<f64>::homogeneous(3, 1000.0, 5, 1).unwrap();
        assert_eq!(fifo_select(&c), Ok(0));

        let mut c = Cluster::<f64>::homogeneous(3, 1000.0, 5, 1).unwrap();
        for (k, len) in [9000, 2000, 5000].into_iter().enumerate() {
            c.admit(TaskSpec { id: k as u64, arrival_slot: 0, length: len }, k).unwrap();
        }
        assert_eq!([0, 1, 2].map(|k| c.busy_until(k)), [9.0, 2.0, 5.0]);
        assert_eq!(fifo_select(&c), Ok(1));

        // fill vm 1: the next-earliest with room is vm 2
        for id in 10..14 {
            c.admit(TaskSpec { id, arrival_slot: 0, length: 100 }, 1).unwrap();
        }
        assert_eq!(fifo_select(&c), Ok(2));
    }

    #[test]
    fn qsch_empty_cluster_takes_lowest_index() {
        let c = with_free(5, &[5, 5, 5]);
        let mut rng = SimRng::seed_from_u64(0);
        let table = QTable::new(3);
        assert!((0..50).all(|_| qsch_agent(&c, &table, 0.0, &mut rng) == Ok(0)));
        assert_eq!(QschFeatures::<f64>::default().encode(&with_free(2, &[2, 0, 1])), QschState(vec![2, 0, 1]));
    }
}
