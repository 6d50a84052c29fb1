use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;

use qlsched::baselines::{fifo_select, greedy_select, mixed_select, random_select, Fifo, Greedy, Mixed, RandomPolicy};
use qlsched::cloud::{Cluster, Outcome, VmSpec};
use qlsched::metrics::{avg_response_time, makespan, MetricsReport};
use qlsched::sim::{simulate, Dispatcher, SimConfig, SimRng};
use qlsched::workload::generate_workload;
use qlsched::{ScenarioConfig, TaskSpec};

fn config(k: usize, n: usize, pes: usize, failure_ratio: f64) -> SimConfig<f64> {
    SimConfig {
        vms: (0..k).map(|i| VmSpec::new(i, 1000.0, n).with_pes(pes)).collect(),
        slot_seconds: 1.0,
        failure_ratio,
        max_attempts: 10,
        check_invariants: true,
    }
}

fn workload() -> impl Strategy<Value = Vec<TaskSpec>> {
    prop::collection::vec((0u64..4, 1u64..80_000), 1..40).prop_map(|raw| {
        let mut slot = 0;
        raw.into_iter()
            .enumerate()
            .map(|(i, (gap, length))| {
                slot += gap;
                TaskSpec { id: i as u64, arrival_slot: slot, length }
            })
            .collect()
    })
}

fn policy(i: usize) -> Box<dyn Dispatcher<f64>> {
    match i {
        0 => Box::new(RandomPolicy),
        1 => Box::new(Fifo),
        2 => Box::new(Mixed),
        _ => Box::new(Greedy),
    }
}

/// Cluster with capacity `cap` per VM and the given free counts.
fn with_free(cap: usize, free: &[usize]) -> Cluster<f64> {
    let mut c = Cluster::homogeneous(free.len(), 1000.0, cap, 1).unwrap();
    let mut id = 0;
    for (k, f) in free.iter().enumerate() {
        for _ in 0..cap - f {
            c.admit(TaskSpec { id, arrival_slot: 0, length: 1000 + id }, k).unwrap();
            id += 1;
        }
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn every_task_ends_in_exactly_one_record(
        tasks in workload(),
        k in 1usize..4,
        n in 1usize..5,
        pes in 1usize..3,
        fail in 0.0f64..0.5,
        p in 0usize..4,
        seed in any::<u64>(),
    ) {
        let sim = simulate(&config(k, n, pes, fail), &tasks, policy(p).as_mut(), seed).unwrap();
        let mut seen = BTreeMap::new();
        for r in sim.records() {
            *seen.entry(r.task_id).or_insert(0) += 1;
            prop_assert!(r.finished_at >= r.started_at + r.execution - 1e-9);
            prop_assert!(r.started_at >= r.assigned_at);
            prop_assert!((r.response_time() - (r.waiting_time() + r.execution)).abs() <= 1e-9);
            if r.outcome == Outcome::Completed {
                prop_assert!((r.execution - r.length as f64 / 1000.0).abs() <= 1e-9);
            }
        }
        prop_assert_eq!(seen.len(), tasks.len());
        prop_assert!(seen.values().all(|&c| c == 1));
    }

    #[test]
    fn policies_only_pick_vms_with_room(free in prop::collection::vec(0usize..4, 1..5), p in 0usize..4, seed in any::<u64>()) {
        let c = with_free(3, &free);
        let mut rng = SimRng::seed_from_u64(seed);
        match policy(p).select(&c, &mut rng) {
            Ok(k) => prop_assert!(c.vm(k).free() > 0),
            Err(_) => prop_assert!(!c.has_free_buffer()),
        }
    }
}

#[test]
fn doubling_speed_halves_every_time_metric() {
    let scenario = ScenarioConfig::scenario1();
    let base = SimConfig::<f64>::from_scenario(&scenario, 10);
    let mut fast = base.clone();
    fast.slot_seconds /= 2.0;
    for vm in &mut fast.vms {
        vm.mips *= 2.0;
    }
    for seed in 0..10 {
        let tasks = generate_workload(&scenario, seed).unwrap();
        for p in 0..4 {
            let slow = simulate(&base, &tasks, policy(p).as_mut(), seed).unwrap();
            let quick = simulate(&fast, &tasks, policy(p).as_mut(), seed).unwrap();
            let a = MetricsReport::from_records(slow.records(), &base.vms).unwrap();
            let b = MetricsReport::from_records(quick.records(), &fast.vms).unwrap();
            for (x, y) in
                [(a.avg_response_s, b.avg_response_s), (a.avg_wait_s, b.avg_wait_s), (a.makespan_s, b.makespan_s)]
            {
                assert!((x / 2.0 - y).abs() <= 1e-9 * x.max(1.0), "policy {p} seed {seed}: {x} vs {y}");
            }
            assert_eq!(a.load_share, b.load_share);
        }
    }
}

#[test]
fn makespan_bounds_response_when_everything_arrives_at_once() {
    let cfg = config(3, 5, 1, 0.0);
    let tasks: Vec<TaskSpec> = (0..15).map(|i| TaskSpec { id: i, arrival_slot: 0, length: 1000 * (i + 1) }).collect();
    for p in 0..4 {
        let sim = simulate(&cfg, &tasks, policy(p).as_mut(), 3).unwrap();
        assert!(makespan(sim.records()).unwrap() >= avg_response_time(sim.records()).unwrap());
    }
}

#[test]
fn mixed_lands_on_a_most_free_vm() {
    let mut rng = SimRng::seed_from_u64(0);
    for k in 1..=3usize {
        for cap in 1..=3usize {
            let combos = (cap + 1).pow(k as u32);
            for code in 0..combos {
                let free: Vec<usize> = (0..k).map(|i| code / (cap + 1).pow(i as u32) % (cap + 1)).collect();
                let c = with_free(cap, &free);
                let max = *free.iter().max().unwrap();
                for _ in 0..20 {
                    match mixed_select(&c, &mut rng) {
                        Ok(v) => assert_eq!(free[v], max, "free {free:?}"),
                        Err(_) => assert_eq!(max, 0),
                    }
                }
            }
        }
    }
}

#[test]
fn random_is_uniform_over_vms_with_room() {
    let c = with_free(3, &[2, 0, 3, 1]);
    let mut rng = SimRng::seed_from_u64(21);
    let n = 100_000;
    let mut counts = [0f64; 4];
    for _ in 0..n {
        counts[random_select(&c, &mut rng).unwrap()] += 1.0;
    }
    assert_eq!(counts[1], 0.0);
    let expected = n as f64 / 3.0;
    let chi2: f64 = [0, 2, 3].iter().map(|&k| (counts[k] - expected).powi(2) / expected).sum();
    // 99th percentile of chi-square with 2 degrees of freedom
    assert!(chi2 < 9.21, "chi-square {chi2}");
}

#[test]
fn deterministic_policies_ignore_the_stream() {
    let c = with_free(4, &[1, 3, 3, 0]);
    let first = (fifo_select(&c), greedy_select(&c));
    for _ in 0..10 {
        assert_eq!((fifo_select(&c), greedy_select(&c)), first);
    }
    assert_eq!(greedy_select(&c), Ok(1));
}
