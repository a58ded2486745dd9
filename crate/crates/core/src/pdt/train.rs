use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{PdtParams, TokenBatch};
use crate::error::{Error, Result};
use crate::tensor::{Adam, DenseArray, Graph};
use crate::trajectory::{concat_input, ModelInput, Segment, StochasticPrompt, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Context windows drawn per task per step.
    pub batch_per_task: usize,
    /// Tasks drawn (without replacement) per step; `0` uses every task.
    pub tasks_per_step: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_per_task: 8,
            tasks_per_step: 0,
            lr: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Offline data for one task: training trajectories and the segment pool prompts are drawn from.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task_id: usize,
    pub trajectories: Vec<Trajectory>,
    pub prompt_segments: Vec<Segment>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// `(step, task_id, loss)` rows.
    pub task_losses: Vec<(usize, usize, f64)>,
}

impl TrainReport {
    /// Mean loss over the first and last `n` steps.
    pub fn head_tail(&self, n: usize) -> (f64, f64) {
        let n = n.clamp(1, self.losses.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (
            mean(&self.losses[..n.min(self.losses.len())]),
            mean(&self.losses[self.losses.len().saturating_sub(n)..]),
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,task_id,loss\n");
        for (s, t, l) in &self.task_losses {
            let _ = writeln!(out, "{s},{t},{l}");
        }
        out
    }
}

fn sample_prompt(
    rng: &mut ChaCha8Rng,
    segments: &[Segment],
    j: usize,
) -> Result<StochasticPrompt> {
    let chosen = (0..j)
        .map(|_| segments[rng.random_range(0..segments.len())].clone())
        .collect();
    crate::trajectory::assemble_prompt(chosen, j)
}

fn sample_window(rng: &mut ChaCha8Rng, trajectories: &[Trajectory], k: usize) -> Vec<crate::trajectory::Transition> {
    let traj = &trajectories[rng.random_range(0..trajectories.len())];
    let end = rng.random_range(0..traj.len());
    let start = (end + 1).saturating_sub(k);
    traj.transitions[start..=end].to_vec()
}

struct Batch {
    tokens: TokenBatch,
    /// Flat hidden-state rows carrying an action target, grouped by task.
    rows: Vec<usize>,
    cont_targets: Vec<f64>,
    stop_targets: Vec<f64>,
    /// `(task_id, first row, row count)`.
    groups: Vec<(usize, usize, usize)>,
}

fn build_batch(
    params: &PdtParams,
    rng: &mut ChaCha8Rng,
    tasks: &[&TaskData],
    per_task: usize,
) -> Result<Batch> {
    let c = &params.config;
    let mut tokens = TokenBatch::new(c.max_seq_len());
    let (mut rows, mut cont, mut stop, mut groups) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let nc = c.action_dim - 1;
    for task in tasks {
        let first = rows.len();
        for _ in 0..per_task {
            let prompt = if c.prompt_j > 0 {
                sample_prompt(rng, &task.prompt_segments, c.prompt_j)?
            } else {
                StochasticPrompt::empty()
            };
            let window = sample_window(rng, &task.trajectories, c.context_k);
            let input: ModelInput = concat_input(&prompt, &window, c.context_k);
            let b = tokens.batch;
            tokens.push_input(c, &input)?;
            let slots = tokens.state_slots[b].iter().flatten();
            for (slot, t) in slots.zip(&input.window) {
                rows.push(b * tokens.seq_len + slot);
                cont.extend(t.action[..nc].iter().map(|a| a / c.action_scale));
                stop.push(t.action[nc]);
            }
        }
        groups.push((task.task_id, first, rows.len() - first));
    }
    Ok(Batch {
        tokens,
        rows,
        cont_targets: cont,
        stop_targets: stop,
        groups,
    })
}

/// One optimizer step; returns the mean loss and per-task losses.
fn train_step(
    params: &mut PdtParams,
    opt: &mut Adam,
    batch: &Batch,
    grad_clip: f64,
) -> Result<(f64, Vec<(usize, f64)>)> {
    let c = params.config.clone();
    let nc = c.action_dim - 1;
    let n = batch.rows.len();
    let (loss_value, per_task, mut grads) = {
        let mut g = Graph::new(&params.weights);
        let hidden = params.forward_hidden(&mut g, &batch.tokens)?;
        let out = params.action_head(&mut g, hidden, &batch.rows)?;
        let cont = g.slice(out, 1, 0, nc)?;
        let logits = g.slice(out, 1, nc, 1)?;
        let target = DenseArray::new(vec![n, nc], batch.cont_targets.clone())?;
        let mse = g.mse_loss(cont, &target, None)?;
        let bce = g.bce_with_logits(logits, &batch.stop_targets, None)?;
        let mse = g.scale(mse, c.continuous_loss_weight);
        let bce = g.scale(bce, c.stop_loss_weight);
        let loss = g.add(mse, bce)?;

        let ov = g.value(out).values();
        let per_task = batch
            .groups
            .iter()
            .map(|&(task, first, count)| {
                let mut m = 0.0;
                let mut b = 0.0;
                for r in first..first + count {
                    for d in 0..nc {
                        let e = ov[r * c.action_dim + d] - batch.cont_targets[r * nc + d];
                        m += e * e;
                    }
                    let x = ov[r * c.action_dim + nc];
                    let t = batch.stop_targets[r];
                    b += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
                }
                let cnt = count.max(1) as f64;
                (
                    task,
                    c.continuous_loss_weight * m / (cnt * nc as f64) + c.stop_loss_weight * b / cnt,
                )
            })
            .collect();
        (g.value(loss).item(), per_task, g.backward(loss)?)
    };
    if grad_clip > 0.0 {
        grads.clip_norm(grad_clip);
    }
    opt.step(&mut params.weights, &grads);
    Ok((loss_value, per_task))
}

fn check_tasks(tasks: &[TaskData], j: usize) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::EmptyDataset("no training tasks".into()));
    }
    for t in tasks {
        if t.trajectories.iter().all(Trajectory::is_empty) {
            return Err(Error::EmptyDataset(format!("task {} has no transitions", t.task_id)));
        }
        if j > 0 && t.prompt_segments.is_empty() {
            return Err(Error::EmptyDataset(format!("task {} has no prompt segments", t.task_id)));
        }
    }
    Ok(())
}

/// Multi-task offline training with uniformly sampled prompts.
pub fn train_offline(params: &mut PdtParams, tasks: &[TaskData], config: &TrainConfig) -> Result<TrainReport> {
    train_offline_with(params, tasks, config, |_, _| {})
}

/// As [`train_offline`], calling `progress(step, loss)` after every step.
pub fn train_offline_with(
    params: &mut PdtParams,
    tasks: &[TaskData],
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    check_tasks(tasks, params.config.prompt_j)?;
    let tasks: Vec<TaskData> = tasks
        .iter()
        .map(|t| TaskData {
            trajectories: t.trajectories.iter().filter(|tr| !tr.is_empty()).cloned().collect(),
            ..t.clone()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(&params.weights, config.lr, config.weight_decay);
    let mut report = TrainReport::default();
    let per_step = if config.tasks_per_step == 0 {
        tasks.len()
    } else {
        config.tasks_per_step.min(tasks.len())
    };
    for step in 0..config.steps {
        let chosen: Vec<&TaskData> = if per_step == tasks.len() {
            tasks.iter().collect()
        } else {
            rand::seq::index::sample(&mut rng, tasks.len(), per_step)
                .into_iter()
                .map(|i| &tasks[i])
                .collect()
        };
        let batch = build_batch(params, &mut rng, &chosen, config.batch_per_task)?;
        let (loss, per_task) = train_step(params, &mut opt, &batch, config.grad_clip)?;
        report.losses.push(loss);
        report
            .task_losses
            .extend(per_task.into_iter().map(|(t, l)| (step, t, l)));
        progress(step, loss);
    }
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FinetuneReport {
    /// Mean offline action loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// `(epoch, return)` from the optional online evaluator.
    pub online_returns: Vec<(usize, f64)>,
}

/// Continues training on one task. An epoch is as many steps as it takes to draw
/// one window per transition of the task's data.
pub fn finetune(
    params: &mut PdtParams,
    task: &TaskData,
    epochs: usize,
    config: &TrainConfig,
    eval_every: usize,
    mut evaluate: impl FnMut(&PdtParams, usize) -> Result<f64>,
) -> Result<FinetuneReport> {
    let mut report = FinetuneReport::default();
    if epochs == 0 {
        return Ok(report);
    }
    check_tasks(std::slice::from_ref(task), params.config.prompt_j)?;
    let transitions: usize = task.trajectories.iter().map(Trajectory::len).sum();
    let steps_per_epoch = transitions.div_ceil(config.batch_per_task.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(&params.weights, config.lr, config.weight_decay);
    let task = TaskData {
        trajectories: task.trajectories.iter().filter(|t| !t.is_empty()).cloned().collect(),
        ..task.clone()
    };
    for epoch in 0..epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let batch = build_batch(params, &mut rng, &[&task], config.batch_per_task)?;
            total += train_step(params, &mut opt, &batch, config.grad_clip)?.0;
        }
        report.epoch_losses.push(total / steps_per_epoch as f64);
        if eval_every > 0 && (epoch + 1) % eval_every == 0 {
            report.online_returns.push((epoch + 1, evaluate(params, epoch + 1)?));
        }
    }
    Ok(report)
}
