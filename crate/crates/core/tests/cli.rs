//! Drives the `pdtune` binary end to end on a tiny configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pdtune::experiment::parse_history_csv;

const TINY: &str = "\
# small enough to run every subcommand in seconds
profile = ci
data.train_episodes = 4
data.prompt_trajectories = 3
model.embed_dim = 8
model.blocks = 1
train.steps = 3
train.prompt_js = 1, 2
tune.rounds = 12
tune.report_window = 5
eval.seeds = 0, 1
mixture.levels = 0, 50, 100
ood.finetune_epochs = 1
";

fn pdtune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdtune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pdtune(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Run {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.cfg");
        fs::write(&config, TINY).unwrap();
        let out = dir.path().join("run");
        Self { _dir: dir, config, out }
    }

    fn args<'a>(&'a self, cmd: &'a str) -> Vec<&'a str> {
        vec![
            cmd,
            "--config",
            self.config.to_str().unwrap(),
            "--out",
            self.out.to_str().unwrap(),
        ]
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> String {
        let mut a = self.args(cmd);
        a.extend_from_slice(extra);
        ok(&a)
    }

    fn code(&self, cmd: &str, extra: &[&str]) -> i32 {
        let mut a = self.args(cmd);
        a.extend_from_slice(extra);
        pdtune(&a).status.code().unwrap()
    }

    fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.out.join(rel)).unwrap()
    }
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn exit_codes() {
    let run = Run::new();
    assert_eq!(run.code("tune", &[]), 3, "tune without models");
    assert_eq!(run.code("train", &[]), 3, "train without data");
    assert_eq!(run.code("plot", &[]), 3, "plot without histories");
    assert_eq!(run.code("gen-data", &["--set", "tune.nonsense=1"]), 2);
    assert_eq!(run.code("gen-data", &["--set", "eval.seeds="]), 2);
    assert_eq!(pdtune(&["tune", "--config", "/nonexistent/x.cfg"]).status.code(), Some(2));
    run.run("gen-data", &[]);
    assert_eq!(run.code("gen-data", &[]), 2, "refuses to overwrite");
    run.run("gen-data", &["--force"]);
    assert_eq!(run.code("tune", &["--method", "bogus"]), 2);
}

#[test]
fn full_pipeline_is_reproducible() {
    let a = Run::new();
    let b = Run::new();
    for run in [&a, &b] {
        run.run("gen-data", &[]);
        run.run("train", &[]);
        run.run("tune", &["--jobs", if std::ptr::eq(run, &a) { "1" } else { "3" }]);
        run.run("mixture", &[]);
        run.run("ood", &[]);
        run.run("plot", &[]);
    }
    let (fa, fb) = (files_under(&a.out), files_under(&b.out));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(fb[k] == *v, "{} differs between identical runs", k.display());
    }

    let data = fa.keys().filter(|k| k.starts_with("data")).count();
    assert_eq!(data, 120);
    let prompt = a.read("data/prompt_07.jsonl");
    assert_eq!(prompt.lines().filter(|l| l.starts_with("{\"task_id\"")).count(), 3);

    // every output carries the same provenance tag
    let summary = a.read("results/tune_summary.csv");
    let tag = summary.lines().next().unwrap().to_string();
    assert!(tag.starts_with("# pdtune ") && tag.contains("config=") && tag.contains("seed=0"));
    for rel in ["results/mixture.csv", "results/ood.csv", "results/tune_cells.csv"] {
        assert_eq!(a.read(rel).lines().next().unwrap(), tag);
    }

    // untuned and tuned rows per J, plus the prompt-free baseline
    let rows = data_rows(&summary);
    let key = |r: &Vec<String>| (r[0].clone(), r[3].clone());
    let keys: Vec<_> = rows.iter().map(key).collect();
    for j in ["pdt_j1", "pdt_j2"] {
        for m in ["none", "eps_greedy", "ucb", "perturb"] {
            assert!(keys.contains(&(j.to_string(), m.to_string())), "missing {j} {m}");
        }
    }
    assert!(keys.contains(&("dt".to_string(), "none".to_string())));

    // the summary mean is the mean over cells of the final-window mean, recomputed from the history
    let history = parse_history_csv(&a.read("results/history_pdt_j1_eps_greedy_raw.csv")).unwrap();
    let mut cells: BTreeMap<(usize, u64), Vec<f64>> = BTreeMap::new();
    for r in &history {
        cells.entry((r.task_id, r.seed)).or_default().push(r.g);
    }
    assert_eq!(cells.len(), 16 * 2);
    let finals: Vec<f64> = cells.values().map(|g| g[g.len() - 5..].iter().sum::<f64>() / 5.0).collect();
    let mean = finals.iter().sum::<f64>() / finals.len() as f64;
    let row = rows.iter().find(|r| r[0] == "pdt_j1" && r[3] == "eps_greedy").unwrap();
    assert!((row[5].parse::<f64>().unwrap() - mean).abs() < 1e-9);

    // mixture grid: levels x methods, seeds averaged
    let mixture = data_rows(&a.read("results/mixture.csv"));
    assert_eq!(mixture.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["0", "50", "100"]);
    let mixture_cells = data_rows(&a.read("results/mixture_cells.csv"));
    assert_eq!(mixture_cells.len(), 3 * 3 * 2);

    // OOD: pretrained and fine-tuned rows, both methods
    let ood = data_rows(&a.read("results/ood.csv"));
    assert_eq!(ood.len(), 2);
    let ood_history = parse_history_csv(&a.read("results/ood_pretrained_history.csv")).unwrap();
    assert!(ood_history.iter().all(|r| r.goal[0] > 0.0 && r.goal[1] < 0.0));

    let svg = a.read("results/plots/history_pdt_j1_eps_greedy_raw_curve.svg");
    assert!(svg.starts_with("<svg") || svg.contains("<svg"));
    assert!(a.out.join("results/plots/history_pdt_j1_eps_greedy_raw_scatter.svg").exists());
}

#[test]
fn plot_handles_empty_and_malformed_histories() {
    let run = Run::new();
    let dir = run.out.join("results");
    fs::create_dir_all(&dir).unwrap();
    let empty = dir.join("history_empty.csv");
    fs::write(&empty, "task_id,seed,round,slot_0_traj,slot_0_offset,G,epsilon_or_ucb_bonus_scale,mean_x,mean_y,goal_x,goal_y\n").unwrap();
    run.run("plot", &[]);
    let svg = run.read("results/plots/history_empty_curve.svg");
    assert!(svg.contains("<line") || svg.contains("<path"));

    let bad = dir.join("history_bad.csv");
    fs::write(&bad, "task_id,seed,round,G\n1,0,zero,3\n").unwrap();
    assert_eq!(run.code("plot", &["--input", bad.to_str().unwrap()]), 1);
    let missing = dir.join("history_missing.csv");
    assert_eq!(run.code("plot", &["--input", missing.to_str().unwrap()]), 3);
}
