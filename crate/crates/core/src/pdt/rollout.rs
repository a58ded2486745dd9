use std::collections::HashMap;

use super::model::PdtParams;
use crate::env::Environment;
use crate::error::Result;
use crate::trajectory::{concat_input, StochasticPrompt, Trajectory, Transition};

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub total_return: f64,
    pub trajectory: Trajectory,
}

/// Runs one episode with a fixed prompt. The environment must be freshly reset.
pub fn rollout(
    params: &PdtParams,
    prompt: &StochasticPrompt,
    env: &mut dyn Environment,
    task_id: usize,
    target_return: f64,
) -> Result<RolloutResult> {
    let c = &params.config;
    let mut obs = env.reset();
    let mut rtg = target_return;
    let mut history: Vec<Transition> = Vec::new();
    let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..env.max_steps() {
        history.push(Transition {
            return_to_go: rtg,
            state: obs.clone(),
            action: vec![0.0; c.action_dim],
            reward: 0.0,
            timestep: t,
        });
        let input = concat_input(prompt, &history, c.context_k);
        let out = params.act(&input)?;
        let mut action = out[..c.action_dim - 1].to_vec();
        action.push(if out[c.action_dim - 1] > 0.0 { 1.0 } else { 0.0 });
        let (next, reward, done) = env.step(&action)?;
        let last = history.last_mut().expect("pushed above");
        last.action.clone_from(&action);
        last.reward = reward;
        states.push(obs);
        actions.push(action);
        rewards.push(reward);
        rtg -= reward;
        obs = next;
        if done {
            break;
        }
        if history.len() > c.context_k {
            history.remove(0);
        }
    }
    let trajectory = Trajectory::from_steps(task_id, states, actions, rewards)?;
    Ok(RolloutResult {
        total_return: trajectory.total_return,
        trajectory,
    })
}

/// Memoized returns for a frozen model; rollouts are deterministic, so a
/// `(task, prompt provenance)` pair always yields the same return.
#[derive(Debug, Default, Clone)]
pub struct RolloutCache {
    returns: HashMap<(usize, Vec<(usize, usize)>), f64>,
    hits: usize,
}

impl RolloutCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_run(
        &mut self,
        task_id: usize,
        prompt: &StochasticPrompt,
        run: impl FnOnce() -> Result<f64>,
    ) -> Result<f64> {
        let key = (task_id, prompt.provenance());
        if let Some(&g) = self.returns.get(&key) {
            self.hits += 1;
            return Ok(g);
        }
        let g = run()?;
        self.returns.insert(key, g);
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    pub fn hits(&self) -> usize {
        self.hits
    }
}
