//! Scripted demonstration data: noisy experts, random novices, mixtures, and
//! their JSON-lines persistence.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{self, distance, EnvAction, EnvConfig, TaskSpec, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const PROMPT_NOISE: f64 = 0.05;
pub const NOVICE_STOP_PROB: f64 = 0.05;
pub const NOVICE_PERCENTILE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Expert,
    Novice,
    Mixture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub task_id: usize,
    pub trajectories: Vec<Trajectory>,
    pub quality: Quality,
    pub expert_fraction: f64,
    /// Per-member origin; only `Expert` or `Novice`.
    pub labels: Vec<Quality>,
}

impl DemoSet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn mean_return(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().map(|t| t.total_return).sum::<f64>() / self.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.trajectories.len() {
            return Err(Error::InvalidArgument("one label per trajectory required".into()));
        }
        for t in &self.trajectories {
            if t.task_id != self.task_id {
                return Err(Error::TaskMismatch(self.task_id, t.task_id));
            }
            t.validate(STATE_DIM, ACTION_DIM)?;
        }
        if self.quality == Quality::Mixture {
            let experts = self.labels.iter().filter(|&&l| l == Quality::Expert).count();
            if (self.expert_fraction * self.len() as f64).round() as usize != experts {
                return Err(Error::InvalidArgument(format!(
                    "expert fraction {} disagrees with {experts} expert members",
                    self.expert_fraction
                )));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; derives independent stream seeds from a base seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

fn run_policy(
    config: &EnvConfig,
    task: &TaskSpec,
    mut policy: impl FnMut(&env::EnvState) -> EnvAction,
) -> Trajectory {
    let mut state = env::reset(task);
    let (mut states, mut actions, mut rewards) = (vec![], vec![], vec![]);
    while !state.done {
        let mut action = policy(&state);
        action.movement = env::clamp_move(config, action.movement);
        if action.stop {
            action.movement = [0.0, 0.0];
        }
        let r = env::step(config, task, &state, &action).expect("episode is live");
        states.push(state.position.to_vec());
        actions.push(action.to_vector());
        rewards.push(r.reward);
        state = r.state;
    }
    Trajectory::from_steps(task.id, states, actions, rewards).expect("aligned steps")
}

/// Heads for the goal at full speed with uniform noise on each move component,
/// stopping once within the proximity radius.
pub fn scripted_expert(config: &EnvConfig, task: &TaskSpec, noise_scale: f64, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run_policy(config, task, |s| {
        let d = distance(s.position, task.goal);
        if d <= config.proximity {
            return EnvAction {
                movement: [0.0, 0.0],
                stop: true,
            };
        }
        let speed = config.max_step.min(d);
        let mut m = [
            (task.goal[0] - s.position[0]) / d * speed,
            (task.goal[1] - s.position[1]) / d * speed,
        ];
        if noise_scale > 0.0 {
            for c in &mut m {
                *c += rng.random_range(-noise_scale..=noise_scale);
            }
        }
        EnvAction {
            movement: m,
            stop: false,
        }
    })
}

/// Uniform random moves with a small per-step stop probability.
pub fn random_episode(config: &EnvConfig, task: &TaskSpec, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = config.max_step;
    run_policy(config, task, |_| EnvAction {
        movement: [rng.random_range(-a..=a), rng.random_range(-a..=a)],
        stop: rng.random_bool(NOVICE_STOP_PROB),
    })
}

/// The lowest-return 5% of `pool` random episodes.
pub fn scripted_novice(config: &EnvConfig, task: &TaskSpec, seed: u64, pool: usize) -> Result<Vec<Trajectory>> {
    if pool < 20 {
        return Err(Error::InvalidArgument(format!("novice pool {pool} < 20")));
    }
    let mut all: Vec<Trajectory> = (0..pool as u64)
        .map(|i| random_episode(config, task, derive_seed(seed, &[task.id as u64, i])))
        .collect();
    all.sort_by(|a, b| a.total_return.total_cmp(&b.total_return));
    let keep = ((pool as f64 * NOVICE_PERCENTILE).round() as usize).max(1);
    all.truncate(keep);
    Ok(all)
}

/// `n` high-return noisy-expert demonstrations: the best half of a `4n` candidate
/// pool, subsampled uniformly.
pub fn build_prompt_dataset(config: &EnvConfig, task: &TaskSpec, n: usize, seed: u64) -> Result<DemoSet> {
    build_prompt_dataset_with_noise(config, task, n, seed, PROMPT_NOISE)
}

pub fn build_prompt_dataset_with_noise(
    config: &EnvConfig,
    task: &TaskSpec,
    n: usize,
    seed: u64,
    noise: f64,
) -> Result<DemoSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("prompt dataset needs n >= 1".into()));
    }
    let mut pool: Vec<Trajectory> = (0..4 * n as u64)
        .map(|i| scripted_expert(config, task, noise, derive_seed(seed, &[task.id as u64, 1, i])))
        .collect();
    // stable: equal returns keep generation order
    pool.sort_by(|a, b| b.total_return.total_cmp(&a.total_return));
    pool.truncate(2 * n);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[task.id as u64, 2]));
    pool.shuffle(&mut rng);
    pool.truncate(n);
    Ok(DemoSet {
        task_id: task.id,
        labels: vec![Quality::Expert; pool.len()],
        trajectories: pool,
        quality: Quality::Expert,
        expert_fraction: 1.0,
    })
}

pub fn build_novice_dataset(config: &EnvConfig, task: &TaskSpec, n: usize, seed: u64) -> Result<DemoSet> {
    let pool = ((n as f64 / NOVICE_PERCENTILE).ceil() as usize).max(20);
    let mut trajectories = scripted_novice(config, task, derive_seed(seed, &[3]), pool)?;
    trajectories.truncate(n);
    Ok(DemoSet {
        task_id: task.id,
        labels: vec![Quality::Novice; trajectories.len()],
        trajectories,
        quality: Quality::Novice,
        expert_fraction: 0.0,
    })
}

/// `round(j% · n)` expert members followed by novices, where `n` is the expert set size.
///
/// Members are taken as prefixes of seeded permutations, so raising `j` only swaps
/// novices for experts.
pub fn mix_datasets(expert: &DemoSet, novice: &DemoSet, j_percent: u32, seed: u64) -> Result<DemoSet> {
    if expert.task_id != novice.task_id {
        return Err(Error::TaskMismatch(expert.task_id, novice.task_id));
    }
    if j_percent > 100 || j_percent % 10 != 0 {
        return Err(Error::InvalidArgument(format!(
            "expert percentage {j_percent} not in {{0, 10, ..., 100}}"
        )));
    }
    if j_percent == 100 {
        return Ok(expert.clone());
    }
    let n = expert.len();
    let n_expert = (j_percent as f64 / 100.0 * n as f64).round() as usize;
    let n_novice = n - n_expert;
    if n_novice > 0 && novice.is_empty() {
        return Err(Error::EmptyDataset("novice set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[expert.task_id as u64, 4]));
    let mut e_idx: Vec<usize> = (0..n).collect();
    e_idx.shuffle(&mut rng);
    let mut n_idx: Vec<usize> = (0..novice.len()).collect();
    n_idx.shuffle(&mut rng);

    let mut trajectories = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for &i in &e_idx[..n_expert] {
        trajectories.push(expert.trajectories[i].clone());
        labels.push(Quality::Expert);
    }
    for k in 0..n_novice {
        trajectories.push(novice.trajectories[n_idx[k % n_idx.len()]].clone());
        labels.push(Quality::Novice);
    }
    Ok(DemoSet {
        task_id: expert.task_id,
        trajectories,
        quality: Quality::Mixture,
        expert_fraction: j_percent as f64 / 100.0,
        labels,
    })
}

const TRAINING_NOISE: [f64; 5] = [0.0, 0.05, 0.1, 0.2, 0.4];

/// Offline training data: 60% noisy experts over several noise scales, 40% random-policy episodes.
pub fn build_training_dataset(config: &EnvConfig, task: &TaskSpec, episodes: usize, seed: u64) -> Result<DemoSet> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("training dataset needs episodes >= 1".into()));
    }
    let mut trajectories = Vec::with_capacity(episodes);
    let mut labels = Vec::with_capacity(episodes);
    let n_expert = (episodes * 3).div_ceil(5);
    for i in 0..episodes {
        let s = derive_seed(seed, &[task.id as u64, 5, i as u64]);
        if i < n_expert {
            let noise = TRAINING_NOISE[i % TRAINING_NOISE.len()];
            trajectories.push(scripted_expert(config, task, noise, s));
            labels.push(Quality::Expert);
        } else {
            trajectories.push(random_episode(config, task, s));
            labels.push(Quality::Novice);
        }
    }
    Ok(DemoSet {
        task_id: task.id,
        expert_fraction: n_expert as f64 / episodes as f64,
        trajectories,
        quality: Quality::Mixture,
        labels,
    })
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    env_config_hash: String,
    task_id: usize,
    quality: Quality,
    expert_fraction: f64,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct Line {
    task_id: usize,
    label: Quality,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    returns_to_go: Vec<f64>,
    timesteps: Vec<usize>,
}

pub fn encode_dataset(set: &DemoSet, env_config: &EnvConfig) -> String {
    let header = Header {
        schema_version: DATASET_SCHEMA_VERSION,
        env_config_hash: config_hash(&env_config.canonical()),
        task_id: set.task_id,
        quality: set.quality,
        expert_fraction: set.expert_fraction,
        count: set.len(),
    };
    let mut out = serde_json::to_string(&header).expect("serializable");
    out.push('\n');
    for (t, label) in set.trajectories.iter().zip(&set.labels) {
        let line = Line {
            task_id: t.task_id,
            label: *label,
            states: t.transitions.iter().map(|x| x.state.clone()).collect(),
            actions: t.transitions.iter().map(|x| x.action.clone()).collect(),
            rewards: t.transitions.iter().map(|x| x.reward).collect(),
            returns_to_go: t.transitions.iter().map(|x| x.return_to_go).collect(),
            timesteps: t.transitions.iter().map(|x| x.timestep).collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("finite values"));
        out.push('\n');
    }
    out
}

pub fn decode_dataset(text: &str) -> Result<DemoSet> {
    let parse = |line: usize, msg: String| Error::Parse { line, msg };
    let mut lines = text.lines().enumerate().skip_while(|(_, l)| l.starts_with('#'));
    let (_, first) = lines.next().ok_or_else(|| parse(1, "missing header".into()))?;
    let header: Header = serde_json::from_str(first).map_err(|e| parse(1, e.to_string()))?;
    if header.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Version {
            found: header.schema_version,
            expected: DATASET_SCHEMA_VERSION,
        });
    }
    let mut trajectories = Vec::with_capacity(header.count);
    let mut labels = Vec::with_capacity(header.count);
    for (i, raw) in lines {
        let n = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(raw).map_err(|e| parse(n, e.to_string()))?;
        let len = line.states.len();
        if [line.actions.len(), line.rewards.len(), line.returns_to_go.len(), line.timesteps.len()]
            .iter()
            .any(|&l| l != len)
        {
            return Err(parse(n, "field lengths differ".into()));
        }
        let t = Trajectory::from_steps(line.task_id, line.states, line.actions, line.rewards)
            .map_err(|e| parse(n, e.to_string()))?;
        for (tr, (rtg, ts)) in t.transitions.iter().zip(line.returns_to_go.iter().zip(&line.timesteps)) {
            if tr.return_to_go.to_bits() != rtg.to_bits() || tr.timestep != *ts {
                return Err(parse(n, "returns_to_go/timesteps inconsistent with rewards".into()));
            }
        }
        t.validate(STATE_DIM, ACTION_DIM).map_err(|e| parse(n, e.to_string()))?;
        trajectories.push(t);
        labels.push(line.label);
    }
    if trajectories.len() != header.count {
        return Err(parse(
            text.lines().count(),
            format!("header announces {} trajectories, found {}", header.count, trajectories.len()),
        ));
    }
    let set = DemoSet {
        task_id: header.task_id,
        trajectories,
        quality: header.quality,
        expert_fraction: header.expert_fraction,
        labels,
    };
    set.validate()?;
    Ok(set)
}

pub fn save(set: &DemoSet, env_config: &EnvConfig, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, encode_dataset(set, env_config).as_bytes())
}

/// Like [`save`], with a leading `#` comment line (ignored when loading).
pub fn save_tagged(set: &DemoSet, env_config: &EnvConfig, tag: &str, path: &Path) -> Result<()> {
    let body = format!("# {tag}\n{}", encode_dataset(set, env_config));
    crate::io::write_atomic(path, body.as_bytes())
}

pub fn load(path: &Path) -> Result<DemoSet> {
    decode_dataset(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::enumerate_tasks;

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    #[test]
    fn noiseless_expert_is_optimal_on_every_task() {
        for task in enumerate_tasks() {
            let t = scripted_expert(&cfg(), &task, 0.0, 1);
            assert!((t.total_return - 10.0).abs() < 1e-9, "task {} got {}", task.id, t.total_return);
            let nonzero = t.rewards().iter().filter(|r| **r != 0.0).count();
            assert_eq!(nonzero, 1);
        }
    }

    #[test]
    fn expert_stops_at_min_steps() {
        let task = TaskSpec::new(0, 2.9, 1.3);
        let t = scripted_expert(&cfg(), &task, 0.0, 7);
        let last = t.transitions.last().unwrap();
        assert_eq!(last.timestep, 6);
        assert_eq!(last.action[2], 1.0);
        assert_eq!(scripted_expert(&cfg(), &task, 0.1, 3), scripted_expert(&cfg(), &task, 0.1, 3));
    }

    #[test]
    fn novice_is_bottom_percentile() {
        let task = enumerate_tasks()[45];
        let picked = scripted_novice(&cfg(), &task, 11, 100).unwrap();
        assert_eq!(picked.len(), 5);
        let mut pool: Vec<f64> = (0..100u64)
            .map(|i| random_episode(&cfg(), &task, derive_seed(11, &[task.id as u64, i])).total_return)
            .collect();
        pool.sort_by(f64::total_cmp);
        let median = pool[50];
        for t in &picked {
            assert!(t.total_return <= median);
            assert!(t.total_return <= pool[4]);
        }
        assert!(scripted_novice(&cfg(), &task, 11, 19).is_err());
    }

    #[test]
    fn prompt_dataset_sizes() {
        let task = enumerate_tasks()[50];
        let set = build_prompt_dataset(&cfg(), &task, 10, 0).unwrap();
        assert_eq!(set.len(), 10);
        set.validate().unwrap();
        assert_eq!(build_prompt_dataset(&cfg(), &task, 1, 0).unwrap().len(), 1);
    }

    #[test]
    fn mixture_counts_and_identities() {
        let task = enumerate_tasks()[50];
        let e = build_prompt_dataset(&cfg(), &task, 10, 0).unwrap();
        let n = build_novice_dataset(&cfg(), &task, 10, 0).unwrap();
        assert_eq!(mix_datasets(&e, &n, 100, 1).unwrap(), e);
        let zero = mix_datasets(&e, &n, 0, 1).unwrap();
        assert!(zero.labels.iter().all(|&l| l == Quality::Novice));
        assert_eq!(zero.len(), 10);
        let thirty = mix_datasets(&e, &n, 30, 1).unwrap();
        assert_eq!(thirty.labels.iter().filter(|&&l| l == Quality::Expert).count(), 3);
        assert_eq!(thirty.len(), 10);
        thirty.validate().unwrap();
        let other = build_prompt_dataset(&cfg(), &enumerate_tasks()[51], 10, 0).unwrap();
        assert!(matches!(mix_datasets(&other, &n, 30, 1), Err(Error::TaskMismatch(..))));
    }

    #[test]
    fn training_dataset_contents() {
        let task = enumerate_tasks()[20];
        let d = build_training_dataset(&cfg(), &task, 200, 0).unwrap();
        assert_eq!(d.len(), 200);
        assert!(d.trajectories.iter().any(|t| t.total_return >= 9.0));
        d.validate().unwrap();
    }

    #[test]
    fn serialization_round_trip_and_errors() {
        let task = enumerate_tasks()[3];
        let set = build_training_dataset(&cfg(), &task, 12, 4).unwrap();
        let text = encode_dataset(&set, &cfg());
        assert_eq!(decode_dataset(&text).unwrap(), set);

        let cut = &text[..text.len() - 20];
        assert!(matches!(decode_dataset(cut), Err(Error::Parse { .. })));
        let broken = text.replacen("\"rewards\":[", "\"rewards\":[oops", 1);
        assert!(matches!(decode_dataset(&broken), Err(Error::Parse { line: 2, .. })));
        let v2 = text.replacen("\"schema_version\":1", "\"schema_version\":2", 1);
        assert!(matches!(decode_dataset(&v2), Err(Error::Version { found: 2, .. })));

        let empty = DemoSet {
            task_id: 3,
            trajectories: vec![],
            quality: Quality::Expert,
            expert_fraction: 1.0,
            labels: vec![],
        };
        assert_eq!(decode_dataset(&encode_dataset(&empty, &cfg())).unwrap(), empty);
    }
}
