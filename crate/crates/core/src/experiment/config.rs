use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bandit::{EpsilonSchedule, FeatureMode};
use crate::data::config_hash;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::pdt::{PdtConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Ci,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "ci" => Ok(Self::Ci),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk or ci)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Ci => "ci",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_episodes: usize,
    pub prompt_trajectories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub rounds: usize,
    pub report_window: usize,
    pub epsilon: f64,
    /// `constant` uses `epsilon` throughout; `anneal` goes 1 → 0 over `anneal_rounds`.
    pub epsilon_schedule: String,
    pub anneal_rounds: usize,
    pub ucb_c: f64,
    pub hidden: usize,
    pub update_steps: usize,
    pub lr: f64,
    pub features: FeatureMode,
}

impl TuneConfig {
    pub fn schedule(&self) -> EpsilonSchedule {
        if self.epsilon_schedule == "anneal" {
            self.annealed()
        } else {
            EpsilonSchedule::Constant(self.epsilon)
        }
    }

    pub fn annealed(&self) -> EpsilonSchedule {
        EpsilonSchedule::Linear {
            start: 1.0,
            end: 0.0,
            rounds: self.anneal_rounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub model: PdtConfig,
    pub train: TrainConfig,
    /// Prompt sizes `J` that get their own checkpoint.
    pub prompt_js: Vec<usize>,
    pub train_dt: bool,
    pub tune: TuneConfig,
    pub seeds: Vec<u64>,
    pub ring_radius: f64,
    pub mixture_task: usize,
    pub mixture_levels: Vec<u32>,
    pub finetune_epochs: usize,
    pub jobs: usize,
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut model = PdtConfig::default();
        let mut train = TrainConfig {
            tasks_per_step: 8,
            ..TrainConfig::default()
        };
        let mut finetune_epochs = 250;
        if profile == Profile::Ci {
            model.embed_dim = 64;
            model.blocks = 2;
            train.steps = 1000;
            finetune_epochs = 25;
        }
        Self {
            profile,
            seed: 0,
            env: EnvConfig::default(),
            data: DataConfig {
                train_episodes: 200,
                prompt_trajectories: 10,
            },
            model,
            train,
            prompt_js: vec![1, 2, 4],
            train_dt: true,
            tune: TuneConfig {
                rounds: 250,
                report_window: 50,
                epsilon: 0.1,
                epsilon_schedule: "constant".into(),
                anneal_rounds: 30,
                ucb_c: 3.0,
                hidden: 16,
                update_steps: 50,
                lr: 1e-3,
                features: FeatureMode::Raw,
            },
            seeds: vec![0, 1, 2],
            ring_radius: 2.9,
            mixture_task: 40,
            mixture_levels: (0..=10).map(|i| i * 10).collect(),
            finetune_epochs,
            jobs: 1,
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
            value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse(key, s))
                .collect()
        }
        let v = value;
        match key {
            "profile" => {
                let seed = self.seed;
                *self = Self::for_profile(parse(key, v)?);
                self.seed = seed;
            }
            "seed" => self.seed = parse(key, v)?,
            "jobs" => self.jobs = parse::<usize>(key, v)?.max(1),
            "env.max_step" => self.env.max_step = parse(key, v)?,
            "env.horizon" => self.env.horizon = parse(key, v)?,
            "env.proximity" => self.env.proximity = parse(key, v)?,
            "env.bonus" => self.env.bonus = parse(key, v)?,
            "env.bonus_decay" => self.env.bonus_decay = parse(key, v)?,
            "data.train_episodes" => self.data.train_episodes = parse(key, v)?,
            "data.prompt_trajectories" => self.data.prompt_trajectories = parse(key, v)?,
            "model.blocks" => self.model.blocks = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse(key, v)?,
            "model.context_k" => self.model.context_k = parse(key, v)?,
            "model.prompt_h" => self.model.prompt_h = parse(key, v)?,
            "model.target_return" => self.model.target_return = parse(key, v)?,
            "model.separate_prompt_positions" => self.model.separate_prompt_positions = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch_per_task" => self.train.batch_per_task = parse(key, v)?,
            "train.tasks_per_step" => self.train.tasks_per_step = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.grad_clip" => self.train.grad_clip = parse(key, v)?,
            "train.prompt_js" => self.prompt_js = list(key, v)?,
            "train.dt" => self.train_dt = parse(key, v)?,
            "tune.rounds" => self.tune.rounds = parse(key, v)?,
            "tune.report_window" => self.tune.report_window = parse(key, v)?,
            "tune.epsilon" => self.tune.epsilon = parse(key, v)?,
            "tune.epsilon_schedule" => match v {
                "constant" | "anneal" => self.tune.epsilon_schedule = v.into(),
                _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
            },
            "tune.anneal_rounds" => self.tune.anneal_rounds = parse(key, v)?,
            "tune.ucb_c" => self.tune.ucb_c = parse(key, v)?,
            "tune.hidden" => self.tune.hidden = parse(key, v)?,
            "tune.update_steps" => self.tune.update_steps = parse(key, v)?,
            "tune.lr" => self.tune.lr = parse(key, v)?,
            "tune.features" => self.tune.features = v.parse()?,
            "eval.seeds" => self.seeds = list(key, v)?,
            "eval.ring_radius" => self.ring_radius = parse(key, v)?,
            "mixture.task" => self.mixture_task = parse(key, v)?,
            "mixture.levels" => self.mixture_levels = list(key, v)?,
            "ood.finetune_epochs" => self.finetune_epochs = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.seeds.is_empty() {
            return bad("eval.seeds must not be empty");
        }
        if self.tune.rounds == 0 || self.tune.report_window == 0 {
            return bad("tune.rounds and tune.report_window must be positive");
        }
        if !(0.0..=1.0).contains(&self.tune.epsilon) {
            return bad("tune.epsilon must lie in [0, 1]");
        }
        if self.data.train_episodes == 0 || self.data.prompt_trajectories == 0 {
            return bad("dataset sizes must be positive");
        }
        if self.mixture_levels.iter().any(|j| *j > 100 || j % 10 != 0) {
            return bad("mixture.levels must be multiples of 10 in [0, 100]");
        }
        if self.env.max_step <= 0.0 || self.env.horizon == 0 {
            return bad("env.max_step and env.horizon must be positive");
        }
        Ok(())
    }

    /// Model configuration for prompt size `j` (`0` gives the prompt-free baseline).
    pub fn pdt_config(&self, j: usize) -> PdtConfig {
        PdtConfig {
            prompt_j: j,
            action_scale: self.env.max_step,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self, j: usize) -> TrainConfig {
        TrainConfig {
            seed: crate::data::derive_seed(self.seed, &[101, j as u64]),
            ..self.train.clone()
        }
    }

    /// Canonical JSON form; the basis of [`Self::hash`].
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        // worker count never changes results
        c.jobs = 1;
        serde_json::to_string(&c).expect("serializable")
    }

    pub fn hash(&self) -> String {
        config_hash(&self.canonical())
    }
}

/// Reads `key = value` lines; `include = other.cfg` splices another file (relative
/// to the including file) in place. `#` starts a comment.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    read_into(path, &mut seen, &mut out)?;
    Ok(out)
}

fn read_into(path: &Path, seen: &mut HashSet<PathBuf>, out: &mut Vec<(String, String)>) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let canon = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
    if !seen.insert(canon) {
        return Err(Error::Config(format!("include cycle through {}", path.display())));
    }
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("{}:{}: expected `key = value`", path.display(), n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k == "include" {
            let base = path.parent().unwrap_or(Path::new("."));
            read_into(&base.join(v), seen, out)?;
        } else {
            out.push((k.to_string(), v.to_string()));
        }
    }
    Ok(())
}

/// Profile defaults, then the config file (a `profile` key there resets to that
/// profile's defaults), then explicit overrides.
pub fn build_config(
    profile: Option<Profile>,
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig> {
    let mut entries = match file {
        Some(p) => read_config_file(p)?,
        None => Vec::new(),
    };
    let start = profile
        .or_else(|| {
            entries
                .iter()
                .rev()
                .find(|(k, _)| k == "profile")
                .and_then(|(_, v)| v.parse().ok())
        })
        .unwrap_or(Profile::Desk);
    entries.retain(|(k, _)| k != "profile");
    let mut cfg = ExperimentConfig::for_profile(start);
    for (k, v) in entries.iter().chain(overrides) {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_differ_where_documented() {
        let desk = ExperimentConfig::for_profile(Profile::Desk);
        let ci = ExperimentConfig::for_profile(Profile::Ci);
        assert_eq!((desk.model.blocks, desk.model.heads, desk.model.embed_dim), (3, 1, 128));
        assert_eq!((ci.model.blocks, ci.model.embed_dim, ci.train.steps), (2, 64, 1000));
        assert_eq!(desk.train.steps, 5000);
        assert_ne!(desk.hash(), ci.hash());
    }

    #[test]
    fn include_and_override_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.cfg"), "tune.rounds = 40\nmodel.embed_dim = 32 # small\n").unwrap();
        std::fs::write(
            dir.path().join("run.cfg"),
            "profile = ci\ninclude = base.cfg\ntune.rounds = 60\n",
        )
        .unwrap();
        let cfg = build_config(None, Some(&dir.path().join("run.cfg")), &[("seed".into(), "7".into())]).unwrap();
        assert_eq!(cfg.profile, Profile::Ci);
        assert_eq!(cfg.tune.rounds, 60);
        assert_eq!(cfg.model.embed_dim, 32);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn config_errors() {
        let mut cfg = ExperimentConfig::for_profile(Profile::Ci);
        assert!(matches!(cfg.set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("tune.rounds", "many"), Err(Error::Config(_))));
        cfg.set("model.heads", "3").unwrap();
        assert!(cfg.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loop.cfg");
        std::fs::write(&p, "include = loop.cfg\n").unwrap();
        assert!(matches!(build_config(None, Some(&p), &[]), Err(Error::Config(_))));
    }

    #[test]
    fn jobs_do_not_change_the_hash() {
        let mut a = ExperimentConfig::for_profile(Profile::Ci);
        let h = a.hash();
        a.jobs = 4;
        assert_eq!(a.hash(), h);
    }
}
