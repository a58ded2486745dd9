mod common;

use common::{small_config, walk};
use pdtune::data::{self, build_training_dataset};
use pdtune::env::{enumerate_tasks, EnvConfig, Environment, PointEnv};
use pdtune::pdt::{finetune, rollout, tokenize, train_offline, PdtConfig, PdtParams, TaskData, TrainConfig};
use pdtune::trajectory::{assemble_prompt, concat_input, extract_all_segments, StochasticPrompt, Transition};
use pdtune::Result;

/// Three steps of reward 1 whatever the agent does.
struct FixedRewards {
    t: usize,
}

impl Environment for FixedRewards {
    fn reset(&mut self) -> Vec<f64> {
        self.t = 0;
        vec![0.0, 0.0]
    }

    fn step(&mut self, _action: &[f64]) -> Result<(Vec<f64>, f64, bool)> {
        self.t += 1;
        Ok((vec![self.t as f64, 0.0], 1.0, self.t == 3))
    }

    fn max_steps(&self) -> usize {
        20
    }
}

fn task_data(ids: &[usize], episodes: usize) -> Vec<TaskData> {
    let env = EnvConfig::default();
    let tasks = enumerate_tasks();
    ids.iter()
        .map(|&id| {
            let t = &tasks[id];
            let train = build_training_dataset(&env, t, episodes, 5).unwrap();
            let prompts = data::build_prompt_dataset(&env, t, 4, 6).unwrap();
            TaskData {
                task_id: id,
                trajectories: train.trajectories,
                prompt_segments: extract_all_segments(&prompts.trajectories, 3),
            }
        })
        .collect()
}

fn quick_train(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_per_task: 4,
        lr: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

fn prompt_for(j: usize) -> StochasticPrompt {
    let demo = walk(0, &[0.0, 0.0, 0.0, 0.0, 9.5]);
    assemble_prompt(extract_all_segments(&[demo], 3)[..j].to_vec(), j).unwrap()
}

#[test]
fn default_architecture() {
    let c = PdtConfig::default();
    assert_eq!((c.blocks, c.heads, c.embed_dim, c.context_k, c.prompt_h), (3, 1, 128, 5, 3));
    assert_eq!(c.target_return, 10.0);
    assert_eq!(c.max_seq_len(), 24);
}

#[test]
fn rollout_sums_rewards_from_the_environment() {
    let params = PdtParams::init(small_config(1), 0).unwrap();
    let mut env = FixedRewards { t: 0 };
    let r = rollout(&params, &prompt_for(1), &mut env, 0, 10.0).unwrap();
    assert_eq!(r.total_return, 3.0);
    assert_eq!(r.trajectory.len(), 3);
    let rtg: Vec<f64> = r.trajectory.transitions.iter().map(|t| t.return_to_go).collect();
    assert_eq!(rtg, vec![3.0, 2.0, 1.0]);
}

#[test]
fn rollouts_are_repeatable() {
    let params = PdtParams::init(small_config(2), 4).unwrap();
    let task = enumerate_tasks()[45];
    let prompt = prompt_for(2);
    let run = || {
        let mut env = PointEnv::new(EnvConfig::default(), task);
        rollout(&params, &prompt, &mut env, task.id, 10.0).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn short_window_masks_padding() {
    let config = small_config(1);
    let window = vec![Transition {
        return_to_go: 10.0,
        state: vec![0.0, 0.0],
        action: vec![0.0; 3],
        reward: 0.0,
        timestep: 0,
    }];
    let tokens = tokenize(&config, &concat_input(&prompt_for(1), &window, 5)).unwrap();
    assert_eq!(tokens.seq_len, 24);
    assert_eq!(tokens.masked_count(), 12);
}

#[test]
fn identical_sequences_give_identical_rows_and_stop_probabilities_are_proper() {
    let config = small_config(1);
    let params = PdtParams::init(config.clone(), 9).unwrap();
    let window: Vec<Transition> = walk(0, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).transitions;
    let mut batch = tokenize(&config, &concat_input(&prompt_for(1), &window, 5)).unwrap();
    let single = batch.clone();
    batch.batch = 2;
    batch.features.extend_from_slice(&single.features);
    batch.valid.extend_from_slice(&single.valid);
    batch.state_slots.extend_from_slice(&single.state_slots);
    let p = params.predict_actions(&batch).unwrap();
    for w in 0..5 {
        let (a, b) = (p.get(0, w).unwrap(), p.get(1, w).unwrap());
        assert_eq!(a, b);
        let stop = 1.0 / (1.0 + (-a[2]).exp());
        assert!(stop > 0.0 && stop < 1.0);
    }
}

#[test]
fn segment_encoding_is_deterministic_and_sensitive() {
    let params = PdtParams::init(small_config(1), 2).unwrap();
    let seg = prompt_for(1).segments()[0].clone();
    let a = params.encode_segment(&seg).unwrap();
    assert_eq!(a.len(), 16);
    assert_eq!(a, params.encode_segment(&seg).unwrap());
    let mut other = seg.clone();
    other.transitions[1].state[0] += 0.5;
    assert_ne!(a, params.encode_segment(&other).unwrap());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let tasks = task_data(&[40, 41], 30);
    let run = |seed| {
        let mut p = PdtParams::init(small_config(1), 1).unwrap();
        let report = train_offline(&mut p, &tasks, &quick_train(150, seed)).unwrap();
        (p, report)
    };
    let (a, report) = run(7);
    let (b, _) = run(7);
    assert_eq!(a, b);
    let (head, tail) = report.head_tail(20);
    assert!(tail < 0.5 * head, "loss {head} -> {tail}");
    let (c, _) = run(8);
    assert_ne!(a, c);
}

#[test]
fn prompt_free_model_trains_without_prompt_segments() {
    let mut tasks = task_data(&[40], 10);
    tasks[0].prompt_segments.clear();
    let mut p = PdtParams::init(small_config(1).without_prompt(), 1).unwrap();
    assert!(train_offline(&mut p, &tasks, &quick_train(3, 0)).is_ok());
    let mut with_prompt = PdtParams::init(small_config(1), 1).unwrap();
    assert!(train_offline(&mut with_prompt, &tasks, &quick_train(3, 0)).is_err());
    assert!(train_offline(&mut p, &[], &quick_train(3, 0)).is_err());
}

#[test]
fn finetuning() {
    let env = EnvConfig::default();
    let demos = data::build_prompt_dataset(&env, &enumerate_tasks()[50], 6, 3).unwrap();
    let task = TaskData {
        task_id: 50,
        prompt_segments: extract_all_segments(&demos.trajectories, 3),
        trajectories: demos.trajectories,
    };
    let base = PdtParams::init(small_config(1), 5).unwrap();
    let mut same = base.clone();
    let report = finetune(&mut same, &task, 0, &quick_train(0, 0), 0, |_, _| Ok(0.0)).unwrap();
    assert_eq!(same, base);
    assert!(report.epoch_losses.is_empty());

    let mut tuned = base.clone();
    let mut evals = 0;
    let report = finetune(&mut tuned, &task, 12, &quick_train(0, 0), 4, |_, _| {
        evals += 1;
        Ok(1.0)
    })
    .unwrap();
    assert_eq!(report.epoch_losses.len(), 12);
    assert_eq!(evals, 3);
    assert!(report.epoch_losses[11] < report.epoch_losses[0]);
    assert_ne!(tuned, base);
}

#[test]
fn checkpoint_reload_reproduces_rollouts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut params = PdtParams::init(small_config(1), 3).unwrap();
    train_offline(&mut params, &task_data(&[42], 10), &quick_train(5, 1)).unwrap();
    params.save(&path).unwrap();
    let back = PdtParams::load(&path).unwrap();
    let task = enumerate_tasks()[42];
    let prompt = prompt_for(1);
    let g = |p: &PdtParams| {
        let mut env = PointEnv::new(EnvConfig::default(), task);
        rollout(p, &prompt, &mut env, task.id, 10.0).unwrap().total_return
    };
    assert_eq!(g(&params).to_bits(), g(&back).to_bits());
}
