//! Contextual-bandit prompt tuner: one reward model per prompt slot, selection over
//! a prediction matrix, ε-greedy or count-based UCB exploration.

mod model;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use model::RewardModel;

use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::pdt::PdtParams;
use crate::tensor::DenseArray;
use crate::trajectory::{assemble_prompt, Segment, StochasticPrompt};

/// Floor applied to the return standard deviation before standardizing.
pub const MIN_RETURN_STD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Raw,
    Transformer,
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "transformer" | "psi" => Ok(Self::Transformer),
            other => Err(Error::Config(format!("unknown feature mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Transformer => "transformer",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFeatures {
    pub mode: FeatureMode,
    pub vectors: Vec<Vec<f64>>,
    pub provenance: Vec<(usize, usize)>,
}

impl SegmentFeatures {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Per-dimension standardization over the pool; constant dimensions map to zero.
    pub fn standardized(&self) -> Self {
        let n = self.len().max(1) as f64;
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for v in &self.vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for v in &self.vectors {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                *s += (x - m) * (x - m) / n;
            }
        }
        let vectors = self
            .vectors
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&mean)
                    .zip(&var)
                    .map(|((x, m), s)| if *s > 1e-12 { (x - m) / s.sqrt() } else { 0.0 })
                    .collect()
            })
            .collect();
        Self {
            vectors,
            ..self.clone()
        }
    }

    fn rows(&self, idx: impl Iterator<Item = usize>) -> DenseArray {
        let mut values = Vec::new();
        let mut n = 0;
        for i in idx {
            values.extend_from_slice(&self.vectors[i]);
            n += 1;
        }
        DenseArray::new(vec![n, self.dim()], values).expect("uniform feature length")
    }
}

/// Raw mode flattens each transition as `(return-to-go, state, action)`; transformer
/// mode uses the frozen model's mean hidden state.
pub fn featurize(segments: &[Segment], mode: FeatureMode, params: Option<&PdtParams>) -> Result<SegmentFeatures> {
    let vectors = match mode {
        FeatureMode::Raw => segments.iter().map(Segment::flatten).collect(),
        FeatureMode::Transformer => params.ok_or(Error::MissingModel)?.encode_segments(segments)?,
    };
    Ok(SegmentFeatures {
        mode,
        vectors,
        provenance: segments.iter().map(|s| (s.source_trajectory, s.source_offset)).collect(),
    })
}

/// Mean and floored standard deviation of the observed returns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn fit(returns: &[f64]) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt().max(MIN_RETURN_STD),
        }
    }

    pub fn normalize(&self, g: f64) -> f64 {
        (g - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EpsilonSchedule {
    Constant(f64),
    /// Linear from `start` to `end` over `rounds`, then held at `end`.
    Linear { start: f64, end: f64, rounds: usize },
}

impl EpsilonSchedule {
    pub const ANNEALED: Self = Self::Linear {
        start: 1.0,
        end: 0.0,
        rounds: 30,
    };

    pub fn value(&self, round: usize) -> f64 {
        match *self {
            Self::Constant(e) => e,
            Self::Linear { start, end, rounds } => {
                if round >= rounds {
                    end
                } else {
                    start + (end - start) * round as f64 / rounds as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    EpsGreedy(EpsilonSchedule),
    Ucb { c: f64 },
    /// Every slot drawn uniformly each round, without learning: the untuned baseline.
    Uniform,
}

impl Policy {
    /// Exploration scale logged per round: ε for ε-greedy, `c` for UCB, 1 for uniform.
    pub fn scale(&self, round: usize) -> f64 {
        match self {
            Policy::EpsGreedy(s) => s.value(round),
            Policy::Ucb { c } => *c,
            Policy::Uniform => 1.0,
        }
    }
}

/// Index of the row maximum; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn select_greedy(y: &[Vec<f64>]) -> Vec<usize> {
    y.iter().map(|row| argmax(row)).collect()
}

pub fn select_eps_greedy(y: &[Vec<f64>], eps: f64, rng: &mut impl Rng) -> Vec<usize> {
    y.iter()
        .map(|row| {
            if eps > 0.0 && rng.random::<f64>() < eps {
                rng.random_range(0..row.len())
            } else {
                argmax(row)
            }
        })
        .collect()
}

/// `Y + c·sqrt(ln(k+1)/(1+n))`, with unvisited segments taking priority during
/// the first `|pool|` rounds.
pub fn select_ucb(y: &[Vec<f64>], counts: &[Vec<usize>], c: f64, k: usize) -> Vec<usize> {
    y.iter()
        .zip(counts)
        .map(|(row, n)| {
            let scores: Vec<f64> = row
                .iter()
                .zip(n)
                .map(|(&v, &nm)| {
                    if nm == 0 && k < row.len() {
                        f64::INFINITY
                    } else {
                        v + c * (((k + 1) as f64).ln() / (1 + nm) as f64).sqrt()
                    }
                })
                .collect();
            argmax(&scores)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BanditConfig {
    pub rounds: usize,
    pub policy: Policy,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub lr: f64,
    /// Full-batch gradient steps per slot per round.
    pub update_steps: usize,
    pub seed: u64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            rounds: 250,
            policy: Policy::EpsGreedy(EpsilonSchedule::ANNEALED),
            hidden: 16,
            hidden_layers: 2,
            lr: 1e-3,
            update_steps: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BanditState {
    pub models: Vec<RewardModel>,
    /// `counts[j][m]`: rounds in which slot `j` held segment `m`.
    pub counts: Vec<Vec<usize>>,
    pub buffer: Vec<(Vec<usize>, f64)>,
    pub round: usize,
    pub normalizer: Normalizer,
}

impl BanditState {
    pub fn new(j: usize, pool: usize, input_dim: usize, config: &BanditConfig) -> Self {
        let models = (0..j)
            .map(|s| {
                RewardModel::new(
                    input_dim,
                    config.hidden,
                    config.hidden_layers,
                    config.lr,
                    derive_seed(config.seed, &[17, s as u64]),
                )
            })
            .collect();
        Self {
            models,
            counts: vec![vec![0; pool]; j],
            buffer: Vec::new(),
            round: 0,
            normalizer: Normalizer { mean: 0.0, std: 1.0 },
        }
    }

    /// Records a round's choice and return.
    pub fn observe(&mut self, indices: &[usize], g: f64) {
        for (c, &m) in self.counts.iter_mut().zip(indices) {
            c[m] += 1;
        }
        self.buffer.push((indices.to_vec(), g));
        self.round += 1;
    }
}

/// `Y[j][m] = φ_j(features[m])`.
pub fn predict_matrix(features: &SegmentFeatures, state: &BanditState) -> Result<Vec<Vec<f64>>> {
    let x = features.rows(0..features.len());
    state.models.iter().map(|m| m.predict(&x)).collect()
}

/// Refits every slot model on the whole buffer; returns per-slot loss traces.
pub fn update(state: &mut BanditState, features: &SegmentFeatures, steps: usize) -> Result<Vec<Vec<f64>>> {
    if state.buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let returns: Vec<f64> = state.buffer.iter().map(|(_, g)| *g).collect();
    state.normalizer = Normalizer::fit(&returns);
    let targets: Vec<f64> = returns.iter().map(|g| state.normalizer.normalize(*g)).collect();
    let buffer = &state.buffer;
    state
        .models
        .iter_mut()
        .enumerate()
        .map(|(j, model)| {
            let x = features.rows(buffer.iter().map(|(idx, _)| idx[j]));
            model.fit(&x, &targets, steps)
        })
        .collect()
}

/// Produces the return of a prompt; `indices` name the pool segment in each slot.
pub trait PromptEvaluator {
    fn evaluate(&mut self, indices: &[usize], prompt: &StochasticPrompt) -> Result<f64>;
}

impl<F: FnMut(&[usize], &StochasticPrompt) -> Result<f64>> PromptEvaluator for F {
    fn evaluate(&mut self, indices: &[usize], prompt: &StochasticPrompt) -> Result<f64> {
        self(indices, prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub indices: Vec<usize>,
    /// `(trajectory, offset)` per slot.
    pub provenance: Vec<(usize, usize)>,
    pub g: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<RoundRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.g).collect()
    }

    /// Mean return of the last `n` rounds.
    pub fn final_mean(&self, n: usize) -> f64 {
        let g = self.returns();
        let tail = &g[g.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let j = self.records.first().map_or(0, |r| r.provenance.len());
        let mut out = String::from("round");
        for s in 0..j {
            let _ = write!(out, ",slot_{s}_traj,slot_{s}_offset");
        }
        out.push_str(",G,epsilon_or_ucb_bonus_scale\n");
        for r in &self.records {
            let _ = write!(out, "{}", r.round);
            for (t, o) in &r.provenance {
                let _ = write!(out, ",{t},{o}");
            }
            let _ = writeln!(out, ",{},{}", r.g, r.scale);
        }
        out
    }
}

/// Runs `config.rounds` rounds of select, rollout, store and update.
pub fn tuning_loop(
    evaluator: &mut dyn PromptEvaluator,
    segments: &[Segment],
    features: &SegmentFeatures,
    j: usize,
    config: &BanditConfig,
) -> Result<History> {
    if segments.is_empty() || features.len() != segments.len() {
        return Err(Error::InvalidArgument(format!(
            "{} segments with {} feature vectors",
            segments.len(),
            features.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = BanditState::new(j, segments.len(), features.dim(), config);
    let mut history = History::default();
    for k in 0..config.rounds {
        let indices = match config.policy {
            Policy::Uniform => (0..j).map(|_| rng.random_range(0..segments.len())).collect(),
            Policy::EpsGreedy(schedule) => {
                let y = predict_matrix(features, &state)?;
                select_eps_greedy(&y, schedule.value(k), &mut rng)
            }
            Policy::Ucb { c } => {
                let y = predict_matrix(features, &state)?;
                select_ucb(&y, &state.counts, c, k)
            }
        };
        let prompt = assemble_prompt(indices.iter().map(|&m| segments[m].clone()).collect(), j)?;
        let g = evaluator.evaluate(&indices, &prompt)?;
        state.observe(&indices, g);
        if config.policy != Policy::Uniform {
            update(&mut state, features, config.update_steps)?;
        }
        history.records.push(RoundRecord {
            round: k,
            provenance: prompt.provenance(),
            indices,
            g,
            scale: config.policy.scale(k),
        });
    }
    Ok(history)
}

/// Prefix sums of `oracle_best − G_k`.
pub fn cumulative_regret(history: &History, oracle_best: f64) -> Vec<f64> {
    history
        .records
        .iter()
        .scan(0.0, |acc, r| {
            *acc += oracle_best - r.g;
            Some(*acc)
        })
        .collect()
}

/// Average per-round regret increase over a fraction `[from, to)` of the run.
pub fn regret_slope(regret: &[f64], from: f64, to: f64) -> f64 {
    let n = regret.len();
    let a = (from * n as f64).round() as usize;
    let b = ((to * n as f64).round() as usize).min(n);
    if b <= a {
        return 0.0;
    }
    let before = if a == 0 { 0.0 } else { regret[a - 1] };
    (regret[b - 1] - before) / (b - a) as f64
}
