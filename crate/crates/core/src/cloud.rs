//! The simulated datacenter: VMs with finite FIFO buffers, service times
//! derived from MIPS, and failure injection.

use std::collections::VecDeque;

use rand::Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::workload::TaskSpec;

/// Retry budget per task before a failing task is aborted.
pub const DEFAULT_MAX_ATTEMPTS: u32 = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClusterError {
    #[error("vm {vm} rejected task {task}: buffer full ({capacity} tasks)")]
    AdmissionRejected { vm: usize, task: u64, capacity: usize },
    #[error("no vm with index {0}")]
    NoSuchVm(usize),
    #[error("invalid vm spec: {0}")]
    InvalidSpec(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmSpec<T> {
    pub index: usize,
    pub mips: T,
    pub buffer_capacity: usize,
    /// Independent single-PE servers that share the buffer.
    pub pes: usize,
    pub ram_mb: u64,
    pub bandwidth_mbps: u64,
}

impl<T: Scalar> VmSpec<T> {
    pub fn new(index: usize, mips: T, buffer_capacity: usize) -> Self {
        Self { index, mips, buffer_capacity, pes: 1, ram_mb: 1740, bandwidth_mbps: 1000 }
    }

    pub fn with_pes(mut self, pes: usize) -> Self {
        self.pes = pes;
        self
    }

    pub fn execution_time(&self, length: u64) -> T {
        T::of_u64(length) / self.mips
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    Aborted,
}

/// Per-task timing record; all metrics are computed from these.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRecord<T> {
    pub task_id: u64,
    pub length: u64,
    pub vm_index: usize,
    /// Admission to the VM buffer (S_T).
    pub assigned_at: T,
    /// Service start on a PE.
    pub started_at: T,
    /// End of service (F_T).
    pub finished_at: T,
    /// Service duration (E_T).
    pub execution: T,
    pub attempts: u32,
    pub outcome: Outcome,
}

impl<T: Scalar> CompletionRecord<T> {
    pub fn response_time(&self) -> T {
        self.finished_at - self.assigned_at
    }

    pub fn waiting_time(&self) -> T {
        self.finished_at - self.assigned_at - self.execution
    }
}

#[derive(Debug, Clone)]
struct Slot<T> {
    task: TaskSpec,
    attempt: u32,
    admitted_at: T,
    /// `(start, finish)` once on a PE.
    service: Option<(T, T)>,
}

#[derive(Debug, Clone)]
pub struct Vm<T> {
    spec: VmSpec<T>,
    // in-service entries always form a prefix of the queue
    queue: VecDeque<Slot<T>>,
    assigned_length: u64,
}

impl<T: Scalar> Vm<T> {
    pub fn spec(&self) -> &VmSpec<T> {
        &self.spec
    }

    pub fn occupied(&self) -> usize {
        self.queue.len()
    }

    pub fn free(&self) -> usize {
        self.spec.buffer_capacity - self.queue.len()
    }

    pub fn assigned_length(&self) -> u64 {
        self.assigned_length
    }

    pub fn in_service(&self) -> usize {
        self.queue.iter().take_while(|s| s.service.is_some()).count()
    }

    /// Lengths of the queued tasks, head first.
    pub fn queued_lengths(&self) -> impl Iterator<Item = u64> + '_ {
        self.queue.iter().map(|s| s.task.length)
    }

    fn next_finish(&self) -> Option<T> {
        self.queue.iter().filter_map(|s| s.service.map(|(_, f)| f)).reduce(|a, b| if b < a { b } else { a })
    }

    fn start_waiting(&mut self, now: T) {
        let mips = self.spec.mips;
        let pes = self.spec.pes;
        for slot in self.queue.iter_mut().take(pes) {
            if slot.service.is_none() {
                let exec = T::of_u64(slot.task.length) / mips;
                slot.service = Some((now, now + exec));
            }
        }
    }
}

/// Runtime state of all VMs plus the simulation clock.
#[derive(Debug, Clone)]
pub struct Cluster<T> {
    vms: Vec<Vm<T>>,
    clock: T,
}

impl<T: Scalar> Cluster<T> {
    pub fn new(specs: Vec<VmSpec<T>>) -> Result<Self, ClusterError> {
        if specs.is_empty() {
            return Err(ClusterError::InvalidSpec("at least one vm required".into()));
        }
        for (i, s) in specs.iter().enumerate() {
            if s.index != i {
                return Err(ClusterError::InvalidSpec(format!("vm {i} carries index {}", s.index)));
            }
            if s.mips.is_nan() || s.mips <= T::zero() || s.buffer_capacity == 0 || s.pes == 0 {
                return Err(ClusterError::InvalidSpec(format!("vm {i} needs mips > 0, buffer >= 1 and pes >= 1")));
            }
        }
        let vms = specs.into_iter().map(|spec| Vm { spec, queue: VecDeque::new(), assigned_length: 0 }).collect();
        Ok(Self { vms, clock: T::zero() })
    }

    /// `k` identical VMs.
    pub fn homogeneous(k: usize, mips: T, buffer: usize, pes: usize) -> Result<Self, ClusterError> {
        Self::new((0..k).map(|i| VmSpec::new(i, mips, buffer).with_pes(pes)).collect())
    }

    pub fn num_vms(&self) -> usize {
        self.vms.len()
    }

    pub fn vm(&self, k: usize) -> &Vm<T> {
        &self.vms[k]
    }

    pub fn vms(&self) -> &[Vm<T>] {
        &self.vms
    }

    pub fn specs(&self) -> Vec<VmSpec<T>> {
        self.vms.iter().map(|v| v.spec.clone()).collect()
    }

    pub fn clock(&self) -> T {
        self.clock
    }

    pub fn occupied(&self) -> Vec<usize> {
        self.vms.iter().map(Vm::occupied).collect()
    }

    pub fn free(&self) -> Vec<usize> {
        self.vms.iter().map(Vm::free).collect()
    }

    pub fn assigned_lengths(&self) -> Vec<u64> {
        self.vms.iter().map(Vm::assigned_length).collect()
    }

    pub fn total_occupied(&self) -> usize {
        self.vms.iter().map(Vm::occupied).sum()
    }

    pub fn total_capacity(&self) -> usize {
        self.vms.iter().map(|v| v.spec.buffer_capacity).sum()
    }

    pub fn has_free_buffer(&self) -> bool {
        self.vms.iter().any(|v| v.free() > 0)
    }

    pub fn is_idle(&self) -> bool {
        self.vms.iter().all(|v| v.queue.is_empty())
    }

    /// Earliest instant a PE of VM `k` is available: now if one is free,
    /// otherwise the earliest in-service completion.
    pub fn busy_until(&self, k: usize) -> T {
        let vm = &self.vms[k];
        if vm.in_service() < vm.spec.pes {
            self.clock
        } else {
            vm.next_finish().unwrap_or(self.clock)
        }
    }

    /// Seconds of queued work on VM `k` not yet executed, divided by its PE count.
    pub fn pending_work(&self, k: usize) -> T {
        let vm = &self.vms[k];
        let work: T = vm
            .queue
            .iter()
            .map(|s| match s.service {
                Some((_, f)) => f - self.clock,
                None => vm.spec.execution_time(s.task.length),
            })
            .sum();
        work / T::of_usize(vm.spec.pes)
    }

    /// Places `task` at the tail of VM `vm`'s buffer as its first attempt.
    pub fn admit(&mut self, task: TaskSpec, vm: usize) -> Result<(), ClusterError> {
        self.admit_attempt(task, vm, 1)
    }

    pub fn admit_attempt(&mut self, task: TaskSpec, vm: usize, attempt: u32) -> Result<(), ClusterError> {
        let now = self.clock;
        let target = self.vms.get_mut(vm).ok_or(ClusterError::NoSuchVm(vm))?;
        if target.free() == 0 {
            return Err(ClusterError::AdmissionRejected { vm, task: task.id, capacity: target.spec.buffer_capacity });
        }
        target.queue.push_back(Slot { task, attempt, admitted_at: now, service: None });
        target.assigned_length += task.length;
        target.start_waiting(now);
        Ok(())
    }

    pub fn next_completion_time(&self) -> Option<T> {
        self.vms.iter().filter_map(Vm::next_finish).reduce(|a, b| if b < a { b } else { a })
    }

    /// Moves the clock to the earliest service completion and removes every
    /// task finishing at that instant. The returned records carry the attempt
    /// number and `Outcome::Completed`; the caller decides about failures.
    pub fn advance_to_next_event(&mut self) -> Vec<CompletionRecord<T>> {
        let Some(t) = self.next_completion_time() else {
            return Vec::new();
        };
        self.clock = t;
        let mut done = Vec::new();
        for vm in &mut self.vms {
            let mut i = 0;
            while i < vm.queue.len() {
                match vm.queue[i].service {
                    Some((start, finish)) if finish <= t => {
                        let slot = vm.queue.remove(i).expect("index in bounds");
                        vm.assigned_length -= slot.task.length;
                        done.push(CompletionRecord {
                            task_id: slot.task.id,
                            length: slot.task.length,
                            vm_index: vm.spec.index,
                            assigned_at: slot.admitted_at,
                            started_at: start,
                            finished_at: finish,
                            execution: finish - start,
                            attempts: slot.attempt,
                            outcome: Outcome::Completed,
                        });
                    }
                    _ => i += 1,
                }
            }
            vm.start_waiting(t);
        }
        done
    }

    /// Advances the clock without any completion. `t` must not pass the next completion.
    pub fn advance_clock(&mut self, t: T) {
        debug_assert!(self.next_completion_time().is_none_or(|c| t <= c));
        if t > self.clock {
            self.clock = t;
        }
    }

    /// Verifies the per-VM and system occupancy bounds and recomputes every L_k.
    pub fn check_invariants(&self) -> Result<(), ClusterError> {
        let k = self.vms.len();
        for vm in &self.vms {
            if vm.occupied() > vm.spec.buffer_capacity {
                return Err(ClusterError::Invariant(format!(
                    "vm {} holds {} > {}",
                    vm.spec.index,
                    vm.occupied(),
                    vm.spec.buffer_capacity
                )));
            }
            let recomputed: u64 = vm.queued_lengths().sum();
            if recomputed != vm.assigned_length {
                return Err(ClusterError::Invariant(format!(
                    "vm {} tracks L={} but queue sums to {recomputed}",
                    vm.spec.index, vm.assigned_length
                )));
            }
            if vm.in_service() > vm.spec.pes {
                return Err(ClusterError::Invariant(format!("vm {} over-subscribed", vm.spec.index)));
            }
        }
        let max_buffer = self.vms.iter().map(|v| v.spec.buffer_capacity).max().unwrap_or(0);
        if self.total_occupied() > k * max_buffer {
            return Err(ClusterError::Invariant("system occupancy above K*N".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureOutcome {
    Complete,
    Requeue,
    Abort,
}

/// Bernoulli failure draw for a finished attempt. No randomness is consumed
/// when `failure_ratio` is zero.
pub fn maybe_fail<R: Rng + ?Sized>(
    failure_ratio: f64,
    attempts: u32,
    max_attempts: u32,
    rng: &mut R,
) -> FailureOutcome {
    debug_assert!((0.0..=1.0).contains(&failure_ratio) && attempts >= 1);
    if failure_ratio <= 0.0 || !rng.random_bool(failure_ratio.min(1.0)) {
        FailureOutcome::Complete
    } else if attempts < max_attempts {
        FailureOutcome::Requeue
    } else {
        FailureOutcome::Abort
    }
}
