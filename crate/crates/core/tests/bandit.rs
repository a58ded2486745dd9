use pdtune::bandit::{
    cumulative_regret, featurize, predict_matrix, regret_slope, select_greedy, select_ucb, tuning_loop, update,
    BanditConfig, BanditState, EpsilonSchedule, FeatureMode, Normalizer, Policy, SegmentFeatures,
};
use pdtune::trajectory::{Segment, StochasticPrompt, Transition};
use proptest::prelude::*;

fn pool(n: usize) -> Vec<Segment> {
    (0..n)
        .map(|i| Segment {
            transitions: (0..3)
                .map(|t| Transition {
                    return_to_go: 10.0 - i as f64,
                    state: vec![0.3 * i as f64, 0.1 * t as f64],
                    action: vec![0.5, -0.1 * i as f64, 0.0],
                    reward: 0.0,
                    timestep: t,
                })
                .collect(),
            source_trajectory: i / 4,
            source_offset: i % 4,
        })
        .collect()
}

fn features(segments: &[Segment]) -> SegmentFeatures {
    featurize(segments, FeatureMode::Raw, None).unwrap().standardized()
}

fn stub_run(n: usize, best: usize, policy: Policy, seed: u64) -> pdtune::bandit::History {
    let segments = pool(n);
    let config = BanditConfig {
        rounds: 250,
        policy,
        seed,
        ..BanditConfig::default()
    };
    let mut eval = |idx: &[usize], _: &StochasticPrompt| Ok(if idx[0] == best { 10.0 } else { 0.0 });
    tuning_loop(&mut eval, &segments, &features(&segments), 1, &config).unwrap()
}

#[test]
fn greedy_after_warmup_settles_on_the_rewarding_segment() {
    // The annealed phase misses one of 8 segments with probability about 0.13, so most seeds succeed.
    let settled = (0..20)
        .filter(|&seed| {
            let h = stub_run(8, 7, Policy::EpsGreedy(EpsilonSchedule::ANNEALED), seed);
            assert_eq!(h.len(), 250);
            h.records[200..].iter().filter(|r| r.indices[0] == 7).count() >= 48
        })
        .count();
    assert!(settled >= 14, "only {settled}/20 seeds settled");
}

#[test]
fn constant_epsilon_regret_flattens() {
    let sublinear = (0..20)
        .filter(|&seed| {
            let h = stub_run(8, 7, Policy::EpsGreedy(EpsilonSchedule::Constant(0.1)), seed);
            let r = cumulative_regret(&h, 10.0);
            regret_slope(&r, 0.75, 1.0) < regret_slope(&r, 0.0, 0.25)
        })
        .count();
    assert!(sublinear >= 15, "only {sublinear}/20 seeds flattened");
}

#[test]
fn ucb_visits_every_segment_before_exploiting() {
    let h = stub_run(6, 4, Policy::Ucb { c: 3.0 }, 0);
    let mut first: Vec<usize> = h.records[..6].iter().map(|r| r.indices[0]).collect();
    first.sort();
    assert_eq!(first, vec![0, 1, 2, 3, 4, 5]);
    let best = h.records.iter().filter(|r| r.indices[0] == 4).count();
    assert!(best > 250 / 6, "best segment chosen {best} times");
}

#[test]
fn uniform_policy_never_learns() {
    let h = stub_run(5, 2, Policy::Uniform, 3);
    assert!(h.records.iter().all(|r| r.scale == 1.0));
    let hits = h.records.iter().filter(|r| r.indices[0] == 2).count();
    assert!((25..=75).contains(&hits), "{hits}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn increasing_transforms_keep_greedy_choice(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 1..12), 1..4),
        scale in 0.01f64..50.0,
        shift in -20.0f64..20.0,
    ) {
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| (scale * v + shift).exp()).collect()).collect();
        prop_assert_eq!(select_greedy(&rows), select_greedy(&moved));
    }

    #[test]
    fn ucb_with_equal_counts_is_greedy(
        row in prop::collection::vec(-5.0f64..5.0, 2..10),
        n in 1usize..20,
        c in 0.0f64..5.0,
    ) {
        let counts = vec![vec![n; row.len()]];
        let k = n * row.len();
        prop_assert_eq!(select_ucb(&[row.clone()], &counts, c, k), select_greedy(&[row]));
    }

    #[test]
    fn normalizer_inverts(gs in prop::collection::vec(-100.0f64..10.0, 1..50)) {
        let n = Normalizer::fit(&gs);
        for g in &gs {
            prop_assert!((n.denormalize(n.normalize(*g)) - g).abs() < 1e-12);
        }
    }

    #[test]
    fn counts_sum_to_rounds(
        j in 1usize..4,
        rounds in prop::collection::vec((prop::collection::vec(0usize..6, 4), -5.0f64..10.0), 1..30),
    ) {
        let segments = pool(6);
        let f = features(&segments);
        let mut state = BanditState::new(j, 6, f.dim(), &BanditConfig::default());
        for (idx, g) in &rounds {
            state.observe(&idx[..j], *g);
        }
        update(&mut state, &f, 2).unwrap();
        for c in &state.counts {
            prop_assert_eq!(c.iter().sum::<usize>(), rounds.len());
        }
        prop_assert_eq!(state.buffer.len(), rounds.len());
        let y = predict_matrix(&f, &state).unwrap();
        prop_assert_eq!(y.len(), j);
        prop_assert!(y.iter().all(|r| r.len() == 6 && r.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn same_seed_same_history(seed in any::<u64>(), ucb in any::<bool>()) {
        let policy = if ucb { Policy::Ucb { c: 3.0 } } else { Policy::EpsGreedy(EpsilonSchedule::Constant(0.1)) };
        let segments = pool(5);
        let f = features(&segments);
        let config = BanditConfig { rounds: 12, policy, seed, update_steps: 5, ..BanditConfig::default() };
        let run = || {
            let mut eval = |idx: &[usize], _: &StochasticPrompt| Ok(idx.iter().sum::<usize>() as f64);
            tuning_loop(&mut eval, &segments, &f, 2, &config).unwrap()
        };
        prop_assert_eq!(run(), run());
    }
}
