use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::{ExperimentConfig, TuneConfig};
use super::report::{tag, write_tagged};
use crate::bandit::{
    featurize, tuning_loop, BanditConfig, EpsilonSchedule, FeatureMode, History, Policy, RoundRecord, SegmentFeatures,
};
use crate::data::{self, derive_seed, DemoSet};
use crate::env::{distance, enumerate_tasks, test_tasks, train_tasks, EnvConfig, PointEnv, TaskSpec};
use crate::error::{Error, Result};
use crate::pdt::{finetune, rollout, train_offline_with, PdtParams, RolloutCache, TaskData, TrainReport};
use crate::perturb::hill_climb;
use crate::trajectory::{extract_all_segments, Segment, StochasticPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    None,
    EpsGreedy,
    Ucb,
    Perturb,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::None, Method::EpsGreedy, Method::Ucb, Method::Perturb];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::EpsGreedy => "eps_greedy",
            Method::Ucb => "ucb",
            Method::Perturb => "perturb",
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Method::None),
            "eps_greedy" | "eps" => Ok(Method::EpsGreedy),
            "ucb" => Ok(Method::Ucb),
            "perturb" => Ok(Method::Perturb),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Applies `f` to every item on up to `jobs` threads. Results keep input order, and
/// the first failing item (by position) decides the error.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = jobs.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("unpoisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("unpoisoned").expect("every item ran"))
        .collect()
}

/// File locations under an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_data(&self, task: usize) -> PathBuf {
        self.root.join("data").join(format!("train_{task:02}.jsonl"))
    }

    pub fn prompt_data(&self, task: usize) -> PathBuf {
        self.root.join("data").join(format!("prompt_{task:02}.jsonl"))
    }

    /// `j = 0` is the prompt-free baseline.
    pub fn checkpoint(&self, j: usize) -> PathBuf {
        self.root.join("models").join(format!("{}.ckpt", model_name(j)))
    }

    pub fn loss_log(&self, j: usize) -> PathBuf {
        self.root.join("models").join(format!("loss_{}.csv", model_name(j)))
    }

    pub fn results(&self, name: &str) -> PathBuf {
        self.root.join("results").join(name)
    }
}

pub fn model_name(j: usize) -> String {
    if j == 0 {
        "dt".into()
    } else {
        format!("pdt_j{j}")
    }
}

fn require(paths: impl IntoIterator<Item = PathBuf>) -> Result<()> {
    let missing: Vec<PathBuf> = paths.into_iter().filter(|p| !p.exists()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingInputs(missing))
    }
}

/// Writes the offline set `D_i` and prompt set `P_i` of every task.
pub fn gen_data(cfg: &ExperimentConfig, layout: &Layout, force: bool) -> Result<Vec<PathBuf>> {
    let tasks = enumerate_tasks();
    if !force {
        let existing = tasks
            .iter()
            .flat_map(|t| [layout.train_data(t.id), layout.prompt_data(t.id)])
            .find(|p| p.exists());
        if let Some(p) = existing {
            return Err(Error::WouldOverwrite(p));
        }
    }
    let tag = tag(cfg, cfg.seed);
    let written = parallel_map(&tasks, cfg.jobs, |task| {
        let d = data::build_training_dataset(&cfg.env, task, cfg.data.train_episodes, cfg.seed)?;
        let p = data::build_prompt_dataset(&cfg.env, task, cfg.data.prompt_trajectories, cfg.seed)?;
        let (dp, pp) = (layout.train_data(task.id), layout.prompt_data(task.id));
        data::save_tagged(&d, &cfg.env, &tag, &dp)?;
        data::save_tagged(&p, &cfg.env, &tag, &pp)?;
        Ok([dp, pp])
    })?;
    Ok(written.into_iter().flatten().collect())
}

pub fn load_prompt_sets(layout: &Layout, tasks: &[TaskSpec]) -> Result<Vec<DemoSet>> {
    require(tasks.iter().map(|t| layout.prompt_data(t.id)))?;
    tasks.iter().map(|t| data::load(&layout.prompt_data(t.id))).collect()
}

/// Training data for every training task: `D_i` trajectories with `P_i` segments as prompts.
pub fn load_training_tasks(layout: &Layout, h: usize) -> Result<Vec<TaskData>> {
    let tasks = train_tasks();
    require(
        tasks
            .iter()
            .flat_map(|t| [layout.train_data(t.id), layout.prompt_data(t.id)]),
    )?;
    tasks
        .iter()
        .map(|t| {
            let d = data::load(&layout.train_data(t.id))?;
            let p = data::load(&layout.prompt_data(t.id))?;
            Ok(TaskData {
                task_id: t.id,
                trajectories: d.trajectories,
                prompt_segments: extract_all_segments(&p.trajectories, h),
            })
        })
        .collect()
}

/// Model sizes `J` trained by [`train_models`]: the configured prompt sizes, then `0` for the baseline.
pub fn model_js(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut js: Vec<usize> = Vec::new();
    for &j in cfg.prompt_js.iter().filter(|&&j| j > 0) {
        if !js.contains(&j) {
            js.push(j);
        }
    }
    if cfg.train_dt {
        js.push(0);
    }
    js
}

/// Trains, saves and logs one model per entry of [`model_js`].
pub fn train_models(
    cfg: &ExperimentConfig,
    layout: &Layout,
    log: &(dyn Fn(&str) + Sync),
) -> Result<Vec<(usize, TrainReport)>> {
    let tasks = load_training_tasks(layout, cfg.model.prompt_h)?;
    let tag = tag(cfg, cfg.seed);
    parallel_map(&model_js(cfg), cfg.jobs, |&j| {
        let name = model_name(j);
        let mut params = PdtParams::init(cfg.pdt_config(j), derive_seed(cfg.seed, &[7, j as u64]))?;
        let steps = cfg.train.steps;
        let every = (steps / 10).max(1);
        let report = train_offline_with(&mut params, &tasks, &cfg.train_config(j), |step, loss| {
            if (step + 1) % every == 0 {
                log(&format!("{name}: step {}/{steps} loss {loss:.4}", step + 1));
            }
        })?;
        params.save_tagged(&layout.checkpoint(j), &tag)?;
        write_tagged(&layout.loss_log(j), &tag, &report.to_csv())?;
        Ok((j, report))
    })
}

pub fn load_model(layout: &Layout, j: usize) -> Result<PdtParams> {
    let path = layout.checkpoint(j);
    require([path.clone()])?;
    PdtParams::load(&path)
}

/// Rollouts of one frozen model on one task. Prompts assembled from pool segments
/// are memoized by provenance, so the evaluator must only see one pool.
pub struct TaskEvaluator<'a> {
    pub params: &'a PdtParams,
    pub env: EnvConfig,
    pub task: TaskSpec,
    pub target_return: f64,
    cache: RolloutCache,
    rollouts: usize,
}

impl<'a> TaskEvaluator<'a> {
    pub fn new(params: &'a PdtParams, env: EnvConfig, task: TaskSpec, target_return: f64) -> Self {
        Self {
            params,
            env,
            task,
            target_return,
            cache: RolloutCache::new(),
            rollouts: 0,
        }
    }

    /// Always rolls out; for prompts whose values do not match their provenance.
    pub fn run(&mut self, prompt: &StochasticPrompt) -> Result<f64> {
        self.rollouts += 1;
        episode(self.params, self.env, self.task, self.target_return, prompt)
    }

    pub fn evaluate(&mut self, prompt: &StochasticPrompt) -> Result<f64> {
        let (params, env, task, target) = (self.params, self.env, self.task, self.target_return);
        let rollouts = &mut self.rollouts;
        self.cache.get_or_run(task.id, prompt, || {
            *rollouts += 1;
            episode(params, env, task, target, prompt)
        })
    }

    /// Episodes actually simulated so far.
    pub fn rollouts(&self) -> usize {
        self.rollouts
    }
}

fn episode(params: &PdtParams, env: EnvConfig, task: TaskSpec, target: f64, prompt: &StochasticPrompt) -> Result<f64> {
    let mut e = PointEnv::new(env, task);
    Ok(rollout(params, prompt, &mut e, task.id, target)?.total_return)
}

/// A task's candidate segments with standardized features.
pub struct Pool {
    pub segments: Vec<Segment>,
    raw: SegmentFeatures,
    psi: Option<SegmentFeatures>,
}

impl Pool {
    pub fn new(demos: &DemoSet, h: usize, params: Option<&PdtParams>) -> Result<Self> {
        let segments = extract_all_segments(&demos.trajectories, h);
        if segments.is_empty() {
            return Err(Error::EmptyDataset(format!("no length-{h} segments for task {}", demos.task_id)));
        }
        let raw = featurize(&segments, FeatureMode::Raw, None)?.standardized();
        let psi = match params {
            Some(p) => Some(featurize(&segments, FeatureMode::Transformer, Some(p))?.standardized()),
            None => None,
        };
        Ok(Self { segments, raw, psi })
    }

    pub fn features(&self, mode: FeatureMode) -> Result<&SegmentFeatures> {
        match mode {
            FeatureMode::Raw => Ok(&self.raw),
            FeatureMode::Transformer => self.psi.as_ref().ok_or(Error::MissingModel),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub j: usize,
    pub method: Method,
    pub features: FeatureMode,
    pub task_id: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub key: CellKey,
    pub goal: [f64; 2],
    pub history: History,
    /// Mean 2D coordinate of the selected segments per round; `None` without a prompt.
    pub coords: Vec<Option<[f64; 2]>>,
}

impl CellResult {
    pub fn final_mean(&self, window: usize) -> f64 {
        self.history.final_mean(window)
    }
}

fn mean_coord(segments: &[&Segment]) -> Option<[f64; 2]> {
    if segments.is_empty() {
        return None;
    }
    let mut c = [0.0; 2];
    for s in segments {
        let m = s.mean_state();
        c[0] += m[0];
        c[1] += m[1];
    }
    let n = segments.len() as f64;
    Some([c[0] / n, c[1] / n])
}

/// Runs `rounds` rounds of one method on one task with one seed.
pub fn run_cell(
    eval: &mut TaskEvaluator,
    pool: &Pool,
    key: CellKey,
    tune: &TuneConfig,
    schedule: EpsilonSchedule,
    base_seed: u64,
) -> Result<CellResult> {
    let j = eval.params.config.prompt_j;
    let rounds = tune.rounds;
    let seed = derive_seed(base_seed, &[key.task_id as u64, key.seed, key.method as u64, j as u64]);
    let history = if j == 0 {
        let g = eval.evaluate(&StochasticPrompt::empty())?;
        History {
            records: (0..rounds)
                .map(|k| RoundRecord {
                    round: k,
                    indices: vec![],
                    provenance: vec![],
                    g,
                    scale: 0.0,
                })
                .collect(),
        }
    } else if key.method == Method::Perturb {
        let mut f = |p: &StochasticPrompt| eval.run(p);
        hill_climb(&mut f, &pool.segments, j, rounds, seed)?.history
    } else {
        let policy = match key.method {
            Method::EpsGreedy => Policy::EpsGreedy(schedule),
            Method::Ucb => Policy::Ucb { c: tune.ucb_c },
            _ => Policy::Uniform,
        };
        let bandit = BanditConfig {
            rounds,
            policy,
            hidden: tune.hidden,
            hidden_layers: 2,
            lr: tune.lr,
            update_steps: tune.update_steps,
            seed,
        };
        let features = pool.features(if policy == Policy::Uniform { FeatureMode::Raw } else { key.features })?;
        let mut f = |_: &[usize], p: &StochasticPrompt| eval.evaluate(p);
        tuning_loop(&mut f, &pool.segments, features, j, &bandit)?
    };
    let coords = history
        .records
        .iter()
        .map(|r| mean_coord(&r.indices.iter().map(|&i| &pool.segments[i]).collect::<Vec<_>>()))
        .collect();
    Ok(CellResult {
        key,
        goal: eval.task.goal,
        history,
        coords,
    })
}

/// Training tasks on the ring of the configured radius.
pub fn ring_tasks(cfg: &ExperimentConfig) -> Vec<TaskSpec> {
    train_tasks()
        .into_iter()
        .filter(|t| (t.radius - cfg.ring_radius).abs() < 1e-9)
        .collect()
}

#[derive(Debug, Clone)]
pub struct TableRequest {
    /// Prompt sizes to evaluate; `0` is the prompt-free baseline (evaluated untuned only).
    pub js: Vec<usize>,
    pub methods: Vec<Method>,
    pub features: FeatureMode,
    pub schedule: EpsilonSchedule,
    pub tasks: Vec<TaskSpec>,
}

impl TableRequest {
    /// Every configured model and method on the ring.
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            js: model_js(cfg),
            methods: Method::ALL.to_vec(),
            features: cfg.tune.features,
            schedule: cfg.tune.schedule(),
            tasks: ring_tasks(cfg),
        }
    }
}

/// Evaluates every `(J, method, task, seed)` cell. Tasks are the parallel unit and
/// share one rollout cache per model across methods and seeds.
pub fn run_table(cfg: &ExperimentConfig, layout: &Layout, req: &TableRequest) -> Result<Vec<CellResult>> {
    let prompts = load_prompt_sets(layout, &req.tasks)?;
    require(req.js.iter().map(|&j| layout.checkpoint(j)))?;
    let models: Vec<(usize, PdtParams)> = req
        .js
        .iter()
        .map(|&j| Ok((j, load_model(layout, j)?)))
        .collect::<Result<_>>()?;
    let indices: Vec<usize> = (0..req.tasks.len()).collect();
    let per_task = parallel_map(&indices, cfg.jobs, |&i| {
        let task = req.tasks[i];
        let mut out = Vec::new();
        for (j, params) in &models {
            let psi = (req.features == FeatureMode::Transformer && *j > 0).then_some(params);
            let pool = Pool::new(&prompts[i], cfg.model.prompt_h, psi)?;
            let mut eval = TaskEvaluator::new(params, cfg.env, task, params.config.target_return);
            for &method in &req.methods {
                if *j == 0 && method != Method::None {
                    continue;
                }
                for &seed in &cfg.seeds {
                    let key = CellKey {
                        j: *j,
                        method,
                        features: if method == Method::None { FeatureMode::Raw } else { req.features },
                        task_id: task.id,
                        seed,
                    };
                    out.push(run_cell(&mut eval, &pool, key, &cfg.tune, req.schedule, cfg.seed)?);
                }
            }
        }
        Ok(out)
    })?;
    let mut cells: Vec<CellResult> = per_task.into_iter().flatten().collect();
    cells.sort_by_key(|c| c.key);
    Ok(cells)
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    /// Mean over cells of each cell's final-window mean return.
    pub mean: f64,
    /// Spread of the per-cell final-window means.
    pub std: f64,
    /// Per-seed means over tasks, in seed order.
    pub seed_means: Vec<(u64, f64)>,
    pub seed_std: f64,
    pub cells: usize,
}

pub fn aggregate<'c>(cells: impl IntoIterator<Item = &'c CellResult>, window: usize) -> Aggregate {
    let mut per_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for c in cells {
        let m = c.final_mean(window);
        all.push(m);
        per_seed.entry(c.key.seed).or_default().push(m);
    }
    let (mean, std) = mean_std(&all);
    let seed_means: Vec<(u64, f64)> = per_seed.into_iter().map(|(s, v)| (s, mean_std(&v).0)).collect();
    let (_, seed_std) = mean_std(&seed_means.iter().map(|p| p.1).collect::<Vec<_>>());
    Aggregate {
        mean,
        std,
        seed_means,
        seed_std,
        cells: all.len(),
    }
}

/// Aggregates grouped by `(J, method, features)`.
pub fn summarize(cells: &[CellResult], window: usize) -> BTreeMap<(usize, Method, FeatureMode), Aggregate> {
    let mut groups: BTreeMap<(usize, Method, FeatureMode), Vec<&CellResult>> = BTreeMap::new();
    for c in cells {
        groups.entry((c.key.j, c.key.method, c.key.features)).or_default().push(c);
    }
    groups
        .into_iter()
        .map(|(k, v)| (k, aggregate(v, window)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct MixtureLevel {
    pub expert_pct: u32,
    pub cells: Vec<CellResult>,
}

impl MixtureLevel {
    pub fn aggregate(&self, method: Method, window: usize) -> Aggregate {
        aggregate(self.cells.iter().filter(|c| c.key.method == method), window)
    }
}

pub const MIXTURE_METHODS: [Method; 3] = [Method::None, Method::EpsGreedy, Method::Ucb];

/// The J used for the mixture and OOD studies: 1 when trained, else the smallest configured.
pub fn study_j(cfg: &ExperimentConfig) -> Result<usize> {
    cfg.prompt_js
        .iter()
        .copied()
        .filter(|&j| j > 0)
        .min_by_key(|&j| (j != 1, j))
        .ok_or_else(|| Error::Config("no prompt size configured".into()))
}

/// Prompt sets mixing `j%` expert with novice demonstrations on one training task.
pub fn run_mixture(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<MixtureLevel>> {
    let task = *enumerate_tasks()
        .get(cfg.mixture_task)
        .ok_or_else(|| Error::Config(format!("mixture.task {} out of range", cfg.mixture_task)))?;
    let expert = load_prompt_sets(layout, &[task])?.remove(0);
    let j = study_j(cfg)?;
    let params = load_model(layout, j)?;
    let novice = data::build_novice_dataset(&cfg.env, &task, expert.len(), cfg.seed)?;
    let schedule = cfg.tune.schedule();
    parallel_map(&cfg.mixture_levels, cfg.jobs, |&pct| {
        let set = data::mix_datasets(&expert, &novice, pct, cfg.seed)?;
        let psi = (cfg.tune.features == FeatureMode::Transformer).then_some(&params);
        let pool = Pool::new(&set, cfg.model.prompt_h, psi)?;
        let mut eval = TaskEvaluator::new(&params, cfg.env, task, params.config.target_return);
        let mut cells = Vec::new();
        for method in MIXTURE_METHODS {
            for &seed in &cfg.seeds {
                let key = CellKey {
                    j,
                    method,
                    features: if method == Method::None { FeatureMode::Raw } else { cfg.tune.features },
                    task_id: task.id,
                    seed,
                };
                cells.push(run_cell(&mut eval, &pool, key, &cfg.tune, schedule, cfg.seed)?);
            }
        }
        Ok(MixtureLevel { expert_pct: pct, cells })
    })
}

#[derive(Debug, Clone, Default)]
pub struct OodReport {
    pub pretrained: Vec<CellResult>,
    pub finetuned: Vec<CellResult>,
    /// Per task: `(task id, final fine-tuning epoch loss)`.
    pub finetune_loss: Vec<(usize, f64)>,
}

impl OodReport {
    pub fn aggregate(&self, finetuned: bool, method: Method, window: usize) -> Aggregate {
        let cells = if finetuned { &self.finetuned } else { &self.pretrained };
        aggregate(cells.iter().filter(|c| c.key.method == method), window)
    }
}

pub const OOD_METHODS: [Method; 2] = [Method::None, Method::EpsGreedy];

/// Untuned and tuned evaluation on the held-out tasks, with the pretrained model and
/// with a copy fine-tuned on each task's prompt demonstrations. `finetune_epochs = 0`
/// skips the fine-tuned half.
pub fn run_ood(cfg: &ExperimentConfig, layout: &Layout, log: &(dyn Fn(&str) + Sync)) -> Result<OodReport> {
    let tasks = test_tasks();
    let prompts = load_prompt_sets(layout, &tasks)?;
    let j = study_j(cfg)?;
    let params = load_model(layout, j)?;
    let schedule = cfg.tune.schedule();
    let h = cfg.model.prompt_h;
    let indices: Vec<usize> = (0..tasks.len()).collect();
    let evaluate = |model: &PdtParams, i: usize| -> Result<Vec<CellResult>> {
        let task = tasks[i];
        let psi = (cfg.tune.features == FeatureMode::Transformer).then_some(model);
        let pool = Pool::new(&prompts[i], h, psi)?;
        let mut eval = TaskEvaluator::new(model, cfg.env, task, model.config.target_return);
        let mut out = Vec::new();
        for method in OOD_METHODS {
            for &seed in &cfg.seeds {
                let key = CellKey {
                    j,
                    method,
                    features: if method == Method::None { FeatureMode::Raw } else { cfg.tune.features },
                    task_id: task.id,
                    seed,
                };
                out.push(run_cell(&mut eval, &pool, key, &cfg.tune, schedule, cfg.seed)?);
            }
        }
        Ok(out)
    };
    let per_task = parallel_map(&indices, cfg.jobs, |&i| {
        let pre = evaluate(&params, i)?;
        if cfg.finetune_epochs == 0 {
            return Ok((pre, Vec::new(), None));
        }
        let task = tasks[i];
        let data = TaskData {
            task_id: task.id,
            trajectories: prompts[i].trajectories.clone(),
            prompt_segments: extract_all_segments(&prompts[i].trajectories, h),
        };
        let mut tuned = params.clone();
        let train = crate::pdt::TrainConfig {
            seed: derive_seed(cfg.seed, &[211, task.id as u64]),
            ..cfg.train.clone()
        };
        let report = finetune(&mut tuned, &data, cfg.finetune_epochs, &train, 0, |_, _| Ok(0.0))?;
        let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
        log(&format!("ood task {}: fine-tuned {} epochs, loss {last:.4}", task.id, cfg.finetune_epochs));
        let post = evaluate(&tuned, i)?;
        Ok((pre, post, Some((task.id, last))))
    })?;
    let mut report = OodReport::default();
    for (pre, post, loss) in per_task {
        report.pretrained.extend(pre);
        report.finetuned.extend(post);
        report.finetune_loss.extend(loss);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialShift {
    pub task_id: usize,
    /// Mean distance from selected-segment coordinates to the goal over the first rounds.
    pub early: f64,
    /// The same over the final window.
    pub late: f64,
}

/// Per task (averaged over seeds): goal distance of the selected segments early versus late.
pub fn spatial_shift(cells: &[CellResult], early_rounds: usize, window: usize) -> Vec<SpatialShift> {
    let mut per_task: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for c in cells {
        let dists: Vec<f64> = c.coords.iter().flatten().map(|p| distance(*p, c.goal)).collect();
        if dists.is_empty() {
            continue;
        }
        let n = dists.len();
        let early = &dists[..early_rounds.min(n)];
        let late = &dists[n.saturating_sub(window)..];
        let e = per_task.entry(c.key.task_id).or_default();
        e.0.push(mean_std(early).0);
        e.1.push(mean_std(late).0);
    }
    per_task
        .into_iter()
        .map(|(task_id, (e, l))| SpatialShift {
            task_id,
            early: mean_std(&e).0,
            late: mean_std(&l).0,
        })
        .collect()
}

