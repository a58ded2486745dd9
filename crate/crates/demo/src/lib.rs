//! Browser demo: scripted rollouts in the point environment and prompt tuning
//! against a cheap synthetic reward, so the tuner can run without a trained model.
//!
//! Every operation has a plain Rust form returning a serializable struct and a
//! `#[wasm_bindgen]` wrapper returning JSON.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use pdtune::bandit::{featurize, tuning_loop, BanditConfig, EpsilonSchedule, FeatureMode, Policy};
use pdtune::data::{self, derive_seed};
use pdtune::env::{enumerate_tasks, EnvConfig, TaskSpec};
use pdtune::trajectory::{extract_all_segments, Segment, StochasticPrompt};
use pdtune::{Error, Result};

pub const SEGMENT_LEN: usize = 3;
pub const MAX_ROUNDS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskInfo {
    pub id: usize,
    pub goal: [f64; 2],
    pub is_test: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rollout {
    pub task_id: usize,
    pub goal: [f64; 2],
    /// Visited positions, starting at the origin.
    pub path: Vec<[f64; 2]>,
    pub total_return: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TuneRequest {
    pub task_id: usize,
    /// Share of expert demonstrations in the prompt pool, in steps of 10.
    pub expert_pct: u32,
    /// `uniform`, `eps_greedy`, `eps_anneal` or `ucb`.
    pub policy: String,
    pub slots: usize,
    pub rounds: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneTrace {
    pub goal: [f64; 2],
    /// Mean position of each pool segment.
    pub pool: Vec<[f64; 2]>,
    pub expert: Vec<bool>,
    /// Chosen pool indices per round.
    pub chosen: Vec<Vec<usize>>,
    pub returns: Vec<f64>,
    pub scale: Vec<f64>,
}

fn task(id: usize) -> Result<TaskSpec> {
    enumerate_tasks()
        .get(id)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("task {id} out of range 0..60")))
}

fn position(state: &[f64]) -> [f64; 2] {
    [state[0], state[1]]
}

pub fn tasks() -> Vec<TaskInfo> {
    enumerate_tasks()
        .iter()
        .map(|t| TaskInfo {
            id: t.id,
            goal: t.goal,
            is_test: t.is_test,
        })
        .collect()
}

pub fn rollout(task_id: usize, noise: f64, seed: u64) -> Result<Rollout> {
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::InvalidArgument(format!("noise {noise} outside [0, 1]")));
    }
    let t = task(task_id)?;
    let env = EnvConfig::default();
    let traj = data::scripted_expert(&env, &t, noise, seed);
    let mut path = vec![[0.0, 0.0]];
    if let Some(last) = traj.transitions.last() {
        path.extend(traj.transitions.iter().skip(1).map(|tr| position(&tr.state)));
        let a = &last.action;
        if a[2] <= 0.5 {
            let p = position(&last.state);
            let m = pdtune::env::clamp_move(&env, [a[0], a[1]]);
            path.push([p[0] + m[0], p[1] + m[1]]);
        }
    }
    Ok(Rollout {
        task_id,
        goal: t.goal,
        path,
        total_return: traj.total_return,
    })
}

/// Reward for a prompt: high when the chosen segments sit near the goal,
/// falling off with the mean distance and going negative far away.
pub fn synthetic_return(segments: &[Segment], goal: [f64; 2]) -> f64 {
    let d = segments
        .iter()
        .map(|s| pdtune::env::distance(position(&s.mean_state()), goal))
        .sum::<f64>()
        / segments.len().max(1) as f64;
    10.0 * (-(d / 0.7).powi(2)).exp() - d
}

pub fn tune(req: &TuneRequest) -> Result<TuneTrace> {
    let t = task(req.task_id)?;
    if req.rounds == 0 || req.rounds > MAX_ROUNDS {
        return Err(Error::InvalidArgument(format!("rounds must be in 1..={MAX_ROUNDS}")));
    }
    if !(1..=4).contains(&req.slots) {
        return Err(Error::InvalidArgument("slots must be in 1..=4".into()));
    }
    let policy = match req.policy.as_str() {
        "uniform" => Policy::Uniform,
        "eps_greedy" => Policy::EpsGreedy(EpsilonSchedule::Constant(0.1)),
        "eps_anneal" => Policy::EpsGreedy(EpsilonSchedule::ANNEALED),
        "ucb" => Policy::Ucb { c: 3.0 },
        other => return Err(Error::InvalidArgument(format!("unknown policy `{other}`"))),
    };
    let env = EnvConfig::default();
    let expert = data::build_prompt_dataset(&env, &t, 10, derive_seed(req.seed, &[1]))?;
    let novice = data::build_novice_dataset(&env, &t, expert.len(), derive_seed(req.seed, &[2]))?;
    let pool = data::mix_datasets(&expert, &novice, req.expert_pct, req.seed)?;
    let segments = extract_all_segments(&pool.trajectories, SEGMENT_LEN);
    let features = featurize(&segments, FeatureMode::Raw, None)?.standardized();
    let config = BanditConfig {
        rounds: req.rounds,
        policy,
        seed: req.seed,
        ..BanditConfig::default()
    };
    let goal = t.goal;
    let mut eval = |_: &[usize], prompt: &StochasticPrompt| Ok(synthetic_return(prompt.segments(), goal));
    let history = tuning_loop(&mut eval, &segments, &features, req.slots, &config)?;
    Ok(TuneTrace {
        goal,
        pool: segments.iter().map(|s| position(&s.mean_state())).collect(),
        expert: segments
            .iter()
            .map(|s| pool.labels[s.source_trajectory] == data::Quality::Expert)
            .collect(),
        chosen: history.records.iter().map(|r| r.indices.clone()).collect(),
        returns: history.returns(),
        scale: history.records.iter().map(|r| r.scale).collect(),
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = tasks)]
pub fn tasks_json() -> std::result::Result<String, JsError> {
    to_js(Ok(tasks()))
}

#[wasm_bindgen(js_name = rollout)]
pub fn rollout_json(task_id: usize, noise: f64, seed: u64) -> std::result::Result<String, JsError> {
    to_js(rollout(task_id, noise, seed))
}

#[wasm_bindgen(js_name = tune)]
pub fn tune_json(request: &str) -> std::result::Result<String, JsError> {
    let req: TuneRequest = serde_json::from_str(request).map_err(|e| JsError::new(&e.to_string()))?;
    to_js(tune(&req))
}
