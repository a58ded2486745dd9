//! Checks shared by the property and gradient test files and the acceptance run.
#![allow(dead_code)]

use pdtune::bandit::{featurize, select_greedy, update, BanditConfig, BanditState, FeatureMode};
use pdtune::data;
use pdtune::env::{enumerate_tasks, EnvConfig};
use pdtune::pdt::{tokenize, PdtConfig, PdtParams, TokenBatch};
use pdtune::tensor::{checkpoint, grad_check, DenseArray, GradCheckReport, Graph, NodeId, ParamStore};
use pdtune::trajectory::{
    assemble_prompt, compute_returns_to_go, concat_input, count_segments, extract_all_segments, Trajectory,
    Transition,
};
use pdtune::Result;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = std::result::Result<(), String>;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

/// A trajectory of length `len` whose states walk along x with the given rewards.
pub fn walk(task: usize, rewards: &[f64]) -> Trajectory {
    let n = rewards.len();
    Trajectory::from_steps(
        task,
        (0..n).map(|t| vec![0.1 * t as f64, -0.05 * t as f64]).collect(),
        (0..n).map(|t| vec![0.5, -0.25, if t + 1 == n { 1.0 } else { 0.0 }]).collect(),
        rewards.to_vec(),
    )
    .unwrap()
}

pub fn rtg_telescoping(cases: u32) -> Outcome {
    runner(cases)
        .run(&prop::collection::vec(-50.0f64..50.0, 1..40), |rewards| {
            let n = rewards.len();
            let rtg = compute_returns_to_go(&rewards);
            for t in 0..n - 1 {
                prop_assert!((rtg[t] - (rewards[t] + rtg[t + 1])).abs() < 1e-9);
            }
            prop_assert_eq!(rtg[n - 1], rewards[n - 1]);
            let traj = walk(0, &rewards);
            let total: f64 = rewards.iter().sum();
            prop_assert!((traj.total_return - total).abs() < 1e-9);
            prop_assert!((traj.transitions[0].return_to_go - total).abs() < 1e-9);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn segment_count(cases: u32) -> Outcome {
    let ten: Vec<Trajectory> = (0..10).map(|_| walk(0, &[0.0; 20])).collect();
    if count_segments(&ten, 3) != 180 || extract_all_segments(&ten, 3).len() != 180 {
        return Err("10 trajectories of length 20 must give 180 segments of length 3".into());
    }
    runner(cases)
        .run(&(prop::collection::vec(0usize..30, 0..12), 1usize..6), |(lens, h)| {
            let demos: Vec<Trajectory> = lens.iter().map(|&l| walk(0, &vec![0.0; l])).collect();
            let expected: usize = lens.iter().map(|&l| (l + 1).saturating_sub(h)).sum();
            prop_assert_eq!(count_segments(&demos, h), expected);
            let segs = extract_all_segments(&demos, h);
            prop_assert_eq!(segs.len(), expected);
            prop_assert!(segs.iter().all(|s| s.len() == h));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn argmax_ties(cases: u32) -> Outcome {
    let rows = prop::collection::vec(prop::collection::vec(0i32..4, 1..20), 1..5);
    runner(cases)
        .run(&rows, |rows| {
            let y: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
            let picked = select_greedy(&y);
            for (row, &p) in y.iter().zip(&picked) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let first = row.iter().position(|&v| v == max).unwrap();
                prop_assert_eq!(p, first);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Changing what slot 1 chose never changes what slot 0 learns.
pub fn slot_independence(cases: u32) -> Outcome {
    let demos: Vec<Trajectory> = (0..3)
        .map(|i| walk(0, &[0.0, 0.5 * i as f64, -1.0, 2.0]))
        .collect();
    let segs = extract_all_segments(&demos, 2);
    let pool = segs.len();
    let features = featurize(&segs, FeatureMode::Raw, None).unwrap().standardized();
    let rounds = prop::collection::vec((0..pool, 0..pool, 0..pool, -10.0f64..10.0), 2..12);
    runner(cases)
        .run(&rounds, |rounds| {
            let cfg = BanditConfig {
                seed: 5,
                ..BanditConfig::default()
            };
            let mut a = BanditState::new(2, pool, features.dim(), &cfg);
            let mut b = a.clone();
            for &(s0, s1a, s1b, g) in &rounds {
                a.observe(&[s0, s1a], g);
                b.observe(&[s0, s1b], g);
            }
            update(&mut a, &features, 10).unwrap();
            update(&mut b, &features, 10).unwrap();
            prop_assert_eq!(&a.models[0].params, &b.models[0].params);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn small_config(j: usize) -> PdtConfig {
    PdtConfig {
        embed_dim: 16,
        blocks: 2,
        head_width: 32,
        prompt_j: j,
        ..PdtConfig::default()
    }
}

fn random_transition(rng: &mut ChaCha8Rng, t: usize) -> Transition {
    Transition {
        return_to_go: rng.random_range(-10.0..10.0),
        state: vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
        action: vec![
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(0..2) as f64,
        ],
        reward: 0.0,
        timestep: t,
    }
}

/// Predictions at window step `w` ignore the action at `w` and everything after it.
pub fn causal_mask(cases: u32) -> Outcome {
    let config = small_config(1);
    let params = PdtParams::init(config.clone(), 3).unwrap();
    runner(cases)
        .run(&(any::<u64>(), 0usize..5), |(seed, w)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let demo = Trajectory {
                transitions: (0..3).map(|t| random_transition(&mut rng, t)).collect(),
                task_id: 0,
                total_return: 0.0,
            };
            let prompt = assemble_prompt(extract_all_segments(&[demo], 3), 1).unwrap();
            let window: Vec<Transition> = (0..5).map(|t| random_transition(&mut rng, t)).collect();
            let mut changed = window.clone();
            changed[w].action = vec![0.3, 0.1, 1.0 - changed[w].action[2]];
            for t in &mut changed[w + 1..] {
                *t = random_transition(&mut rng, t.timestep);
            }
            let a = params.predict_actions(&tokenize(&config, &concat_input(&prompt, &window, 5)).unwrap()).unwrap();
            let b = params.predict_actions(&tokenize(&config, &concat_input(&prompt, &changed, 5)).unwrap()).unwrap();
            for step in 0..=w {
                let (pa, pb) = (a.get(0, step).unwrap(), b.get(0, step).unwrap());
                for (x, y) in pa.iter().zip(pb) {
                    prop_assert!((x - y).abs() < 1e-12, "step {} differs: {:?} vs {:?}", step, pa, pb);
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn checkpoint_round_trip(cases: u32) -> Outcome {
    let shapes = prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 1..6);
    runner(cases)
        .run(&(shapes, any::<u64>()), |(shapes, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamStore::new();
            for (i, s) in shapes.iter().enumerate() {
                let n: usize = s.iter().product();
                let values = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
                p.insert(format!("p{i}"), DenseArray::new(s.clone(), values).unwrap());
            }
            let (q, meta) = checkpoint::decode(&checkpoint::encode(&p, "meta")).unwrap();
            prop_assert_eq!(q, p);
            prop_assert_eq!(meta, "meta");
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("m.ckpt");
    let params = PdtParams::init(small_config(2), 11).unwrap();
    params.save(&path).map_err(|e| e.to_string())?;
    let back = PdtParams::load(&path).map_err(|e| e.to_string())?;
    if back.config != params.config || back.weights != params.weights {
        return Err("model checkpoint did not round-trip".into());
    }
    Ok(())
}

pub fn dataset_round_trip(cases: u32) -> Outcome {
    let env = EnvConfig::default();
    let tasks = enumerate_tasks();
    runner(cases)
        .run(&(0usize..60, any::<u64>(), 0u32..=10), |(task, seed, tenth)| {
            let task = tasks[task];
            let expert = data::build_prompt_dataset(&env, &task, 5, seed).unwrap();
            let novice = data::build_novice_dataset(&env, &task, 5, seed).unwrap();
            let mixed = data::mix_datasets(&expert, &novice, tenth * 10, seed).unwrap();
            let train = data::build_training_dataset(&env, &task, 6, seed).unwrap();
            for set in [expert, novice, mixed, train] {
                let back = data::decode_dataset(&data::encode_dataset(&set, &env)).unwrap();
                prop_assert_eq!(back, set);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Every property, by name.
pub fn property_suite(cases: u32) -> Vec<(&'static str, Outcome)> {
    vec![
        ("return-to-go telescoping", rtg_telescoping(cases * 4)),
        ("segment count", segment_count(cases * 4)),
        ("argmax tie-breaking", argmax_ties(cases * 4)),
        ("slot independence", slot_independence(cases)),
        ("causal mask", causal_mask(cases)),
        ("checkpoint round-trip", checkpoint_round_trip(cases)),
        ("dataset round-trip", dataset_round_trip(cases / 2 + 1)),
    ]
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseArray {
    let n = shape.iter().product();
    DenseArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for the kink in ReLU.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseArray {
    let mut a = random(rng, shape);
    for v in a.values_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    a
}

/// `mean(y ⊙ w)` for a fixed pseudo-random `w`, turning any output into a scalar.
fn project(g: &mut Graph, y: NodeId) -> Result<NodeId> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = g.input(random(&mut rng, &shape));
    let m = g.mul(y, w)?;
    Ok(g.mean(m))
}

pub struct OpCheck {
    pub name: &'static str,
    /// Smooth ops are held to the tighter tolerance.
    pub smooth: bool,
    pub report: GradCheckReport,
}

fn store(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> ParamStore {
    let mut p = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        p.insert(format!("x{i}"), random(rng, s));
    }
    p
}

fn check(
    name: &'static str,
    smooth: bool,
    params: ParamStore,
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    scalar: bool,
) -> OpCheck {
    let report = grad_check(&params, 1e-6, |g| {
        let ids: Vec<NodeId> = (0..params.len()).map(|i| g.param_at(i)).collect();
        let y = build(g, &ids)?;
        if scalar {
            Ok(y)
        } else {
            project(g, y)
        }
    })
    .unwrap();
    OpCheck { name, smooth, report }
}

pub fn op_gradient_checks() -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let r = &mut rng;
    let mut out = vec![
        check("matmul", true, store(r, &[&[3, 4], &[4, 5]]), |g, x| g.matmul(x[0], x[1]), false),
        check("matmul (3-d)", true, store(r, &[&[2, 3, 4], &[4, 2]]), |g, x| g.matmul(x[0], x[1]), false),
        check(
            "batch_matmul",
            true,
            store(r, &[&[2, 3, 4], &[2, 4, 5]]),
            |g, x| g.batch_matmul(x[0], x[1], false),
            false,
        ),
        check(
            "batch_matmul (transposed)",
            true,
            store(r, &[&[2, 3, 4], &[2, 5, 4]]),
            |g, x| g.batch_matmul(x[0], x[1], true),
            false,
        ),
        check("add", true, store(r, &[&[3, 4], &[3, 4]]), |g, x| g.add(x[0], x[1]), false),
        check(
            "add_broadcast",
            true,
            store(r, &[&[2, 3, 4], &[4]]),
            |g, x| g.add_broadcast(x[0], x[1]),
            false,
        ),
        check("mul", true, store(r, &[&[3, 4], &[3, 4]]), |g, x| g.mul(x[0], x[1]), false),
        check("scale", true, store(r, &[&[3, 4]]), |g, x| Ok(g.scale(x[0], -2.5)), false),
        check(
            "layer_norm",
            true,
            store(r, &[&[3, 6], &[6], &[6]]),
            |g, x| g.layer_norm(x[0], x[1], x[2]),
            false,
        ),
        check("softmax", true, store(r, &[&[3, 5]]), |g, x| Ok(g.softmax(x[0])), false),
        check("gelu", true, store(r, &[&[3, 5]]), |g, x| Ok(g.gelu(x[0])), false),
        check("sigmoid", true, store(r, &[&[3, 5]]), |g, x| Ok(g.sigmoid(x[0])), false),
        check("gather", true, store(r, &[&[5, 4]]), |g, x| g.gather(x[0], &[0, 3, 3, 1]), false),
        check(
            "concat (axis 0)",
            true,
            store(r, &[&[2, 3], &[1, 3]]),
            |g, x| g.concat(&[x[0], x[1]], 0),
            false,
        ),
        check(
            "concat (axis 1)",
            true,
            store(r, &[&[2, 3], &[2, 4]]),
            |g, x| g.concat(&[x[0], x[1]], 1),
            false,
        ),
        check("slice", true, store(r, &[&[4, 6]]), |g, x| g.slice(x[0], 1, 2, 3), false),
        check("reshape", true, store(r, &[&[3, 4]]), |g, x| g.reshape(x[0], &[2, 6]), false),
        check("mean", true, store(r, &[&[3, 4]]), |g, x| Ok(g.mean(x[0])), true),
    ];
    let target = random(r, &[3, 2]);
    out.push(check(
        "mse_loss",
        true,
        store(r, &[&[3, 2]]),
        move |g, x| g.mse_loss(x[0], &target, Some(&[1.0, 0.0, 2.0])),
        true,
    ));
    out.push(check(
        "bce_with_logits",
        true,
        store(r, &[&[4]]),
        |g, x| g.bce_with_logits(x[0], &[0.0, 1.0, 1.0, 0.0], Some(&[1.0, 2.0, 0.0, 1.0])),
        true,
    ));
    let mut relu = ParamStore::new();
    relu.insert("x0", away_from_zero(r, &[3, 5]));
    out.push(check("relu", false, relu, |g, x| Ok(g.relu(x[0])), false));
    out
}

/// The action loss of a 3-block, `d = 16` model on a batch with one full and one padded sequence.
pub fn transformer_gradient_check(eps: f64) -> GradCheckReport {
    let config = PdtConfig {
        embed_dim: 16,
        blocks: 3,
        prompt_j: 1,
        ..PdtConfig::default()
    };
    let model = PdtParams::init(config.clone(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let demo = Trajectory {
        transitions: (0..3).map(|t| random_transition(&mut rng, t)).collect(),
        task_id: 0,
        total_return: 0.0,
    };
    let prompt = assemble_prompt(extract_all_segments(&[demo], 3), 1).unwrap();
    let full: Vec<Transition> = (0..5).map(|t| random_transition(&mut rng, t)).collect();
    let short: Vec<Transition> = (0..2).map(|t| random_transition(&mut rng, t)).collect();
    let mut tokens = TokenBatch::new(config.max_seq_len());
    tokens.push_input(&config, &concat_input(&prompt, &full, 5)).unwrap();
    tokens.push_input(&config, &concat_input(&prompt, &short, 5)).unwrap();
    let mut rows = Vec::new();
    let mut moves = Vec::new();
    let mut stops = Vec::new();
    for (b, (slots, window)) in tokens.state_slots.iter().zip([&full, &short]).enumerate() {
        let offset = slots.iter().filter(|s| s.is_none()).count();
        for (w, slot) in slots.iter().enumerate() {
            if let Some(s) = slot {
                let t = &window[w - offset];
                rows.push(b * tokens.seq_len + s);
                moves.extend_from_slice(&[t.action[0] / 0.5, t.action[1] / 0.5]);
                stops.push(t.action[2]);
            }
        }
    }
    let target = DenseArray::new(vec![rows.len(), 2], moves).unwrap();
    grad_check(&model.weights, eps, |g| {
        let hidden = model.forward_hidden(g, &tokens)?;
        let out = model.action_head(g, hidden, &rows)?;
        let cont = g.slice(out, 1, 0, 2)?;
        let stop = g.slice(out, 1, 2, 1)?;
        let a = g.mse_loss(cont, &target, None)?;
        let b = g.bce_with_logits(stop, &stops, None)?;
        g.add(a, b)
    })
    .unwrap()
}
