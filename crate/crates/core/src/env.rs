//! Sparse-reward 2D point navigation.
//!
//! The agent starts at the origin, moves with two clamped continuous actions,
//! and ends the episode with a binary stop action. Reward is zero on every
//! step except the last: minus the distance to the goal, plus a bonus of
//! `bonus * decay^wasted` when the agent stops within `proximity` of the goal.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 2;
/// `(dx, dy, stop)`; stop is read as `> 0.5`.
pub const ACTION_DIM: usize = 3;

pub const RADII: [f64; 3] = [0.9, 1.9, 2.9];
pub const NUM_ANGLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Per-component bound on the move action.
    pub max_step: f64,
    pub horizon: usize,
    pub proximity: f64,
    pub bonus: f64,
    pub bonus_decay: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_step: 0.5,
            horizon: 20,
            proximity: 0.2,
            bonus: 10.0,
            bonus_decay: 0.95,
        }
    }
}

impl EnvConfig {
    /// Stable textual form used for config hashing.
    pub fn canonical(&self) -> String {
        format!(
            "max_step={};horizon={};proximity={};bonus={};bonus_decay={}",
            self.max_step, self.horizon, self.proximity, self.bonus, self.bonus_decay
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub radius: f64,
    pub angle: f64,
    pub goal: [f64; 2],
    pub gamma: f64,
    pub is_test: bool,
}

impl TaskSpec {
    pub fn new(id: usize, radius: f64, angle: f64) -> Self {
        Self {
            id,
            radius,
            angle,
            goal: [radius * angle.cos(), radius * angle.sin()],
            gamma: 1.0,
            // tolerance keeps 15·π/10 on the training side of the split
            is_test: angle > 1.5 * PI + 1e-9,
        }
    }

    /// Fewest moves that can reach the goal at full speed.
    pub fn min_steps(&self, config: &EnvConfig) -> usize {
        (norm(self.goal) / config.max_step - 1e-9).ceil().max(0.0) as usize
    }
}

/// All 60 tasks: radii `{0.9, 1.9, 2.9}` × angles `k·π/10, k = 0..19`, ordered by `(radius, angle)`.
pub fn enumerate_tasks() -> Vec<TaskSpec> {
    let mut tasks = Vec::with_capacity(RADII.len() * NUM_ANGLES);
    for &r in &RADII {
        for k in 0..NUM_ANGLES {
            tasks.push(TaskSpec::new(tasks.len(), r, k as f64 * PI / 10.0));
        }
    }
    tasks
}

pub fn train_tasks() -> Vec<TaskSpec> {
    enumerate_tasks().into_iter().filter(|t| !t.is_test).collect()
}

pub fn test_tasks() -> Vec<TaskSpec> {
    enumerate_tasks().into_iter().filter(|t| t.is_test).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: [f64; 2],
    pub t: usize,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvAction {
    pub movement: [f64; 2],
    pub stop: bool,
}

impl EnvAction {
    pub fn from_vector(a: &[f64]) -> Self {
        Self {
            movement: [a[0], a[1]],
            stop: a.get(2).is_some_and(|&s| s > 0.5),
        }
    }

    pub fn to_vector(self) -> Vec<f64> {
        vec![
            self.movement[0],
            self.movement[1],
            if self.stop { 1.0 } else { 0.0 },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    norm([a[0] - b[0], a[1] - b[1]])
}

pub fn reset(_task: &TaskSpec) -> EnvState {
    EnvState {
        position: [0.0, 0.0],
        t: 0,
        done: false,
    }
}

/// Advances one step. A stop ends the episode at the current position and the
/// move part of the action is ignored.
pub fn step(
    config: &EnvConfig,
    task: &TaskSpec,
    state: &EnvState,
    action: &EnvAction,
) -> Result<StepResult> {
    if state.done {
        return Err(Error::EpisodeFinished);
    }
    if action.stop {
        let d = distance(state.position, task.goal);
        let mut reward = -d;
        if d <= config.proximity {
            let wasted = state.t.saturating_sub(task.min_steps(config));
            reward += config.bonus * config.bonus_decay.powi(wasted as i32);
        }
        let next = EnvState {
            done: true,
            ..*state
        };
        return Ok(StepResult {
            state: next,
            reward,
            done: true,
        });
    }
    let clamp = |v: f64| {
        if v.is_nan() {
            0.0
        } else {
            v.clamp(-config.max_step, config.max_step)
        }
    };
    let position = [
        state.position[0] + clamp(action.movement[0]),
        state.position[1] + clamp(action.movement[1]),
    ];
    let t = state.t + 1;
    if t >= config.horizon {
        return Ok(StepResult {
            state: EnvState {
                position,
                t,
                done: true,
            },
            reward: -distance(position, task.goal),
            done: true,
        });
    }
    Ok(StepResult {
        state: EnvState {
            position,
            t,
            done: false,
        },
        reward: 0.0,
        done: false,
    })
}

pub fn clamp_move(config: &EnvConfig, movement: [f64; 2]) -> [f64; 2] {
    [
        movement[0].clamp(-config.max_step, config.max_step),
        movement[1].clamp(-config.max_step, config.max_step),
    ]
}

/// Stateful episode driver used by rollouts; lets tests substitute scripted environments.
pub trait Environment {
    fn reset(&mut self) -> Vec<f64>;
    /// Returns `(next observation, reward, done)`.
    fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64, bool)>;
    fn max_steps(&self) -> usize;
}

#[derive(Debug, Clone)]
pub struct PointEnv {
    pub config: EnvConfig,
    pub task: TaskSpec,
    state: EnvState,
}

impl PointEnv {
    pub fn new(config: EnvConfig, task: TaskSpec) -> Self {
        Self {
            config,
            state: reset(&task),
            task,
        }
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }
}

impl Environment for PointEnv {
    fn reset(&mut self) -> Vec<f64> {
        self.state = reset(&self.task);
        self.state.position.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64, bool)> {
        let r = step(
            &self.config,
            &self.task,
            &self.state,
            &EnvAction::from_vector(action),
        )?;
        self.state = r.state;
        Ok((r.state.position.to_vec(), r.reward, r.done))
    }

    fn max_steps(&self) -> usize {
        self.config.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn go(movement: [f64; 2]) -> EnvAction {
        EnvAction {
            movement,
            stop: false,
        }
    }

    const STOP: EnvAction = EnvAction {
        movement: [0.0, 0.0],
        stop: true,
    };

    #[test]
    fn task_grid() {
        let tasks = enumerate_tasks();
        assert_eq!(tasks.len(), 60);
        assert_eq!(tasks.iter().filter(|t| !t.is_test).count(), 48);
        assert_eq!(tasks.iter().filter(|t| t.is_test).count(), 12);
        for t in tasks.iter().filter(|t| t.is_test) {
            assert!(t.angle > 1.5 * PI);
        }
        let t = tasks.iter().find(|t| t.radius == 0.9 && (t.angle - 0.1 * PI).abs() < 1e-12).unwrap();
        assert!((t.goal[0] - 0.8560).abs() < 1e-4 && (t.goal[1] - 0.2781).abs() < 1e-4);
        for w in tasks.windows(2) {
            assert!((w[0].radius, w[0].angle) < (w[1].radius, w[1].angle));
        }
    }

    #[test]
    fn reset_is_origin_and_idempotent() {
        let task = enumerate_tasks()[7];
        let cfg = EnvConfig::default();
        let s = reset(&task);
        assert_eq!(s.position, [0.0, 0.0]);
        let done = step(&cfg, &task, &s, &STOP).unwrap().state;
        assert!(done.done);
        assert_eq!(reset(&task), s);
        assert_eq!(reset(&task).t, 0);
    }

    #[test]
    fn move_without_stop() {
        let task = enumerate_tasks()[0];
        let cfg = EnvConfig::default();
        let r = step(&cfg, &task, &reset(&task), &go([0.3, 0.4])).unwrap();
        assert_eq!(r.state.position, [0.3, 0.4]);
        assert_eq!(r.reward, 0.0);
        assert!(!r.done);
        let r = step(&cfg, &task, &reset(&task), &go([3.0, -9.0])).unwrap();
        assert_eq!(r.state.position, [0.5, -0.5]);
    }

    #[test]
    fn stop_on_goal_at_min_steps_earns_full_bonus() {
        let cfg = EnvConfig::default();
        // goal straight up the x axis: radius 2.9, angle 0
        let task = TaskSpec::new(0, 2.9, 0.0);
        assert_eq!(task.min_steps(&cfg), 6);
        let mut s = reset(&task);
        for _ in 0..5 {
            s = step(&cfg, &task, &s, &go([0.5, 0.0])).unwrap().state;
        }
        s = step(&cfg, &task, &s, &go([0.4, 0.0])).unwrap().state;
        assert_eq!(s.t, 6);
        let r = step(&cfg, &task, &s, &STOP).unwrap();
        assert!((r.reward - 10.0).abs() < 1e-12, "{}", r.reward);
        assert!(r.done);
    }

    #[test]
    fn wasted_steps_decay_the_bonus() {
        let cfg = EnvConfig::default();
        let task = TaskSpec::new(0, 0.9, 0.0);
        let mut s = reset(&task);
        for a in [[0.5, 0.0], [0.4, 0.0], [0.0, 0.0], [0.0, 0.0]] {
            s = step(&cfg, &task, &s, &go(a)).unwrap().state;
        }
        let r = step(&cfg, &task, &s, &STOP).unwrap();
        assert!((r.reward - 10.0 * 0.95f64.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn stop_far_from_goal_is_distance_penalty() {
        let cfg = EnvConfig::default();
        let task = TaskSpec::new(0, 1.0, 0.0);
        let r = step(&cfg, &task, &reset(&task), &STOP).unwrap();
        assert_eq!(r.reward, -1.0);
    }

    #[test]
    fn truncation_applies_penalty_without_bonus() {
        let cfg = EnvConfig::default();
        let task = TaskSpec::new(0, 0.0, 0.0);
        let mut s = reset(&task);
        let mut last = None;
        for _ in 0..cfg.horizon {
            let r = step(&cfg, &task, &s, &go([0.0, 0.0])).unwrap();
            s = r.state;
            last = Some(r);
        }
        let last = last.unwrap();
        assert!(last.done);
        assert_eq!(last.reward, 0.0); // on the goal, but no bonus on truncation
        assert!(matches!(
            step(&cfg, &task, &s, &STOP),
            Err(Error::EpisodeFinished)
        ));
    }

    #[test]
    fn dynamics_are_deterministic() {
        let cfg = EnvConfig::default();
        let task = enumerate_tasks()[33];
        let run = || {
            let mut env = PointEnv::new(cfg, task);
            env.reset();
            let mut out = vec![];
            for i in 0..5 {
                out.push(env.step(&[0.1 * i as f64, -0.2, 0.0]).unwrap());
            }
            out.push(env.step(&[0.0, 0.0, 1.0]).unwrap());
            out
        };
        assert_eq!(run(), run());
    }
}
