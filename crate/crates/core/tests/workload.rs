use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qlsched::workload::{generate_workload, parse_trace, sample_arrivals, write_trace, ArrivalMode, ArrivalModel};
use qlsched::{ScenarioConfig, TaskSpec};

fn total_variation(model: &ArrivalModel, probs: &[f64], draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; probs.len()];
    for _ in 0..draws {
        counts[sample_arrivals(model, 0, &mut rng).unwrap()] += 1;
    }
    0.5 * counts.iter().zip(probs).map(|(&c, p)| (c as f64 / draws as f64 - p).abs()).sum::<f64>()
}

#[test]
fn iid_arrivals_match_their_distribution() {
    let skewed = vec![0.05, 0.15, 0.4, 0.3, 0.1];
    let model = ArrivalModel::iid(skewed.clone()).unwrap();
    assert!(total_variation(&model, &skewed, 1_000_000, 4) < 0.01);

    let model = ScenarioConfig::scenario1().arrival_model().unwrap();
    let ArrivalModel::Iid(probs) = &model else { panic!("scenario default is iid") };
    assert!(total_variation(&model, probs, 1_000_000, 5) < 0.01);
}

#[test]
fn uniform_arrival_mean() {
    let model = ArrivalModel::iid(vec![1.0 / 3.0; 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100_000;
    let total: usize = (0..n).map(|_| sample_arrivals(&model, 0, &mut rng).unwrap()).sum();
    assert!((total as f64 / n as f64 - 1.0).abs() <= 0.02);
}

#[test]
fn generated_lengths_stay_in_range() {
    for mut cfg in [ScenarioConfig::scenario1(), ScenarioConfig::scenario2()] {
        cfg.num_tasks = 10_000;
        let tasks = generate_workload(&cfg, 17).unwrap();
        assert_eq!(tasks.len(), 10_000);
        assert!(tasks.iter().all(|t| (cfg.length_min..=cfg.length_max).contains(&t.length)));
        assert!(tasks.windows(2).all(|w| w[0].arrival_slot <= w[1].arrival_slot && w[0].id + 1 == w[1].id));
    }
}

#[test]
fn markov_arrivals_keep_the_requested_mean() {
    let cfg = ScenarioConfig { arrival_mode: ArrivalMode::Markov, num_tasks: 50_000, ..ScenarioConfig::scenario1() };
    let tasks = generate_workload(&cfg, 2).unwrap();
    let slots = tasks.last().unwrap().arrival_slot + 1;
    let rate = tasks.len() as f64 / slots as f64;
    assert!((rate - cfg.arrival_mean).abs() < 0.05, "rate {rate}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn trace_round_trip(raw in prop::collection::vec((0u64..5, 1u64..1_000_000), 0..50)) {
        let mut slot = 0;
        let tasks: Vec<TaskSpec> = raw
            .into_iter()
            .enumerate()
            .map(|(i, (gap, length))| {
                slot += gap;
                TaskSpec { id: i as u64, arrival_slot: slot, length }
            })
            .collect();
        prop_assert_eq!(parse_trace(&write_trace(&tasks)).unwrap(), tasks);
    }

    #[test]
    fn generation_depends_only_on_seed(seed in any::<u64>(), n in 1usize..60) {
        let cfg = ScenarioConfig { num_tasks: n, ..ScenarioConfig::scenario2() };
        prop_assert_eq!(generate_workload(&cfg, seed).unwrap(), generate_workload(&cfg, seed).unwrap());
    }
}
