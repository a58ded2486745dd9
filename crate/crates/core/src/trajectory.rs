//! Transitions, trajectories, prompt segments and the model input sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tokens contributed by one transition: return-to-go, state, action.
pub const TOKENS_PER_TRANSITION: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub return_to_go: f64,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub timestep: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub task_id: usize,
    pub total_return: f64,
}

/// Undiscounted suffix sums: `out[t] = rewards[t] + out[t + 1]`.
pub fn compute_returns_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

impl Trajectory {
    /// Builds a trajectory from per-step data, filling returns-to-go and timesteps.
    pub fn from_steps(
        task_id: usize,
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if states.len() != actions.len() || states.len() != rewards.len() {
            return Err(Error::InvalidArgument(format!(
                "{} states, {} actions, {} rewards",
                states.len(),
                actions.len(),
                rewards.len()
            )));
        }
        let rtg = compute_returns_to_go(&rewards);
        let total_return = rtg.first().copied().unwrap_or(0.0);
        let transitions = states
            .into_iter()
            .zip(actions)
            .zip(rewards)
            .zip(rtg)
            .enumerate()
            .map(|(t, (((state, action), reward), return_to_go))| Transition {
                return_to_go,
                state,
                action,
                reward,
                timestep: t,
            })
            .collect();
        Ok(Self {
            transitions,
            task_id,
            total_return,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    /// Checks the structural invariants against the given state/action sizes.
    pub fn validate(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let rtg = compute_returns_to_go(&self.rewards());
        for (i, (tr, r)) in self.transitions.iter().zip(&rtg).enumerate() {
            if tr.state.len() != state_dim || tr.action.len() != action_dim {
                return bad(format!("transition {i}: wrong state/action size"));
            }
            if tr.timestep != i {
                return bad(format!("transition {i}: timestep {}", tr.timestep));
            }
            if tr.return_to_go.to_bits() != r.to_bits() {
                return bad(format!("transition {i}: return-to-go {} != {r}", tr.return_to_go));
            }
        }
        let total = rtg.first().copied().unwrap_or(0.0);
        if total.to_bits() != self.total_return.to_bits() {
            return bad(format!("total return {} != {total}", self.total_return));
        }
        Ok(())
    }
}

/// A contiguous window of a demonstration trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub transitions: Vec<Transition>,
    pub source_trajectory: usize,
    pub source_offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Mean of the segment's state vectors.
    pub fn mean_state(&self) -> Vec<f64> {
        let dim = self.transitions.first().map_or(0, |t| t.state.len());
        let mut m = vec![0.0; dim];
        for t in &self.transitions {
            for (a, s) in m.iter_mut().zip(&t.state) {
                *a += s;
            }
        }
        let n = self.transitions.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// `(return-to-go, state..., action...)` per transition, concatenated.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in &self.transitions {
            out.push(t.return_to_go);
            out.extend_from_slice(&t.state);
            out.extend_from_slice(&t.action);
        }
        out
    }
}

/// Every length-`h` window of `trajectory`, tagged with `traj_index`.
pub fn extract_segments(trajectory: &Trajectory, traj_index: usize, h: usize) -> Vec<Segment> {
    assert!(h >= 1, "segment length must be positive");
    trajectory
        .transitions
        .windows(h)
        .enumerate()
        .map(|(offset, w)| Segment {
            transitions: w.to_vec(),
            source_trajectory: traj_index,
            source_offset: offset,
        })
        .collect()
}

/// Segments of all demonstrations in trajectory-then-offset order.
pub fn extract_all_segments(demos: &[Trajectory], h: usize) -> Vec<Segment> {
    demos
        .iter()
        .enumerate()
        .flat_map(|(i, t)| extract_segments(t, i, h))
        .collect()
}

pub fn count_segments(demos: &[Trajectory], h: usize) -> usize {
    assert!(h >= 1, "segment length must be positive");
    demos.iter().map(|t| (t.len() + 1).saturating_sub(h)).sum()
}

/// An ordered list of `J` segments that stays fixed for a whole rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPrompt {
    segments: Vec<Segment>,
}

impl StochasticPrompt {
    /// The empty prompt used by the prompt-free baseline.
    pub fn empty() -> Self {
        Self {
            segments: Vec::new(),
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> &mut [Segment] {
        &mut self.segments
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn segment_len(&self) -> usize {
        self.segments.first().map_or(0, Segment::len)
    }

    pub fn token_count(&self) -> usize {
        self.segments.iter().map(Segment::len).sum::<usize>() * TOKENS_PER_TRANSITION
    }

    /// Transitions of all segments in slot order.
    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.segments.iter().flat_map(|s| s.transitions.iter())
    }

    /// `(trajectory, offset)` provenance per slot.
    pub fn provenance(&self) -> Vec<(usize, usize)> {
        self.segments
            .iter()
            .map(|s| (s.source_trajectory, s.source_offset))
            .collect()
    }
}

/// Validates and wraps `chosen` as a `j`-slot prompt.
pub fn assemble_prompt(chosen: Vec<Segment>, j: usize) -> Result<StochasticPrompt> {
    if chosen.len() != j {
        return Err(Error::MalformedPrompt(format!(
            "expected {j} segments, got {}",
            chosen.len()
        )));
    }
    if let Some(first) = chosen.first() {
        let h = first.len();
        if h == 0 || chosen.iter().any(|s| s.len() != h) {
            return Err(Error::MalformedPrompt(
                "segments must share one non-zero length".into(),
            ));
        }
    }
    Ok(StochasticPrompt { segments: chosen })
}

/// Prompt followed by the most recent transitions of the current episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub prompt: StochasticPrompt,
    pub window: Vec<Transition>,
}

impl ModelInput {
    pub fn token_count(&self) -> usize {
        self.prompt.token_count() + self.window.len() * TOKENS_PER_TRANSITION
    }

    /// All transitions in token order: prompt first, then the window.
    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.prompt.transitions().chain(self.window.iter())
    }
}

/// Keeps the last `min(k, window.len())` transitions after the prompt.
pub fn concat_input(prompt: &StochasticPrompt, window: &[Transition], k: usize) -> ModelInput {
    let start = window.len().saturating_sub(k);
    ModelInput {
        prompt: prompt.clone(),
        window: window[start..].to_vec(),
    }
}
