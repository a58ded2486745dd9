use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pdtune::experiment::{
    self as exp, build_config, ExperimentConfig, Layout, Method, Profile, TableRequest,
};
use pdtune::{Error, Result};

#[derive(Parser)]
#[command(name = "pdtune", version, about = "Prompt tuning experiments for a prompting decision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate offline and prompt datasets for all 60 tasks.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overwrite existing dataset files.
        #[arg(long)]
        force: bool,
    },
    /// Train one model per prompt size (and the prompt-free baseline).
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate untuned, bandit-tuned and perturbation-tuned prompts on the ring tasks.
    Tune {
        #[command(flatten)]
        common: Common,
        /// `all`, or one of none, eps_greedy, ucb, perturb.
        #[arg(long, default_value = "all")]
        method: String,
        /// Segment features for the reward models.
        #[arg(long)]
        features: Option<String>,
    },
    /// Expert/novice prompt mixtures on one training task.
    Mixture {
        #[command(flatten)]
        common: Common,
    },
    /// Held-out tasks, with the pretrained and fine-tuned model.
    Ood {
        #[command(flatten)]
        common: Common,
    },
    /// Render learning curves and selection scatters from history CSVs.
    Plot {
        #[command(flatten)]
        common: Common,
        /// History files; defaults to every `results/history_*.csv` under `--out`.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Ci,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file (supports `include = other.cfg`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, Layout)> {
        let mut overrides = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        if let Some(j) = self.jobs {
            overrides.push(("jobs".into(), j.to_string()));
        }
        let profile = self.profile.map(|p| match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Ci => Profile::Ci,
        });
        let cfg = build_config(profile, self.config.as_deref(), &overrides)?;
        Ok((cfg, Layout::new(&self.out)))
    }
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::WouldOverwrite(_) => 2,
                Error::MissingInputs(_) => 3,
                _ => 1,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, force } => {
            let (cfg, layout) = common.load()?;
            let files = exp::gen_data(&cfg, &layout, force)?;
            log(&format!("wrote {} dataset files to {}", files.len(), layout.root.join("data").display()));
        }
        Command::Train { common } => {
            let (cfg, layout) = common.load()?;
            for (j, report) in exp::train_models(&cfg, &layout, &log)? {
                let (head, tail) = report.head_tail(50);
                log(&format!(
                    "{}: loss {head:.4} -> {tail:.4}, saved {}",
                    exp::model_name(j),
                    layout.checkpoint(j).display()
                ));
            }
        }
        Command::Tune {
            common,
            method,
            features,
        } => {
            let (mut cfg, layout) = common.load()?;
            if let Some(f) = features {
                cfg.tune.features = f.parse()?;
            }
            let mut req = TableRequest::from_config(&cfg);
            if method != "all" {
                req.methods = vec![method.parse::<Method>()?];
                if req.methods[0] != Method::None {
                    req.js.retain(|&j| j > 0);
                }
            }
            tune(&cfg, &layout, &req)?;
        }
        Command::Mixture { common } => {
            let (cfg, layout) = common.load()?;
            let levels = exp::run_mixture(&cfg, &layout)?;
            let tag = exp::tag(&cfg, cfg.seed);
            let table = exp::mixture_csv(&levels, cfg.tune.report_window);
            exp::write_tagged(&layout.results("mixture.csv"), &tag, &table)?;
            exp::write_tagged(
                &layout.results("mixture_cells.csv"),
                &tag,
                &mixture_cells(&levels, cfg.tune.report_window),
            )?;
            print!("{table}");
        }
        Command::Ood { common } => {
            let (cfg, layout) = common.load()?;
            let report = exp::run_ood(&cfg, &layout, &log)?;
            let tag = exp::tag(&cfg, cfg.seed);
            let table = exp::ood_csv(&report, cfg.tune.report_window);
            exp::write_tagged(&layout.results("ood.csv"), &tag, &table)?;
            exp::write_tagged(
                &layout.results("ood_pretrained_history.csv"),
                &tag,
                &exp::history_csv(&report.pretrained),
            )?;
            if !report.finetuned.is_empty() {
                exp::write_tagged(
                    &layout.results("ood_finetuned_history.csv"),
                    &tag,
                    &exp::history_csv(&report.finetuned),
                )?;
            }
            print!("{table}");
        }
        Command::Plot { common, inputs } => {
            let (cfg, layout) = common.load()?;
            plot(&cfg, &layout, inputs)?;
        }
    }
    Ok(())
}

fn tune(cfg: &ExperimentConfig, layout: &Layout, req: &TableRequest) -> Result<()> {
    let cells = exp::run_table(cfg, layout, req)?;
    let tag = exp::tag(cfg, cfg.seed);
    let window = cfg.tune.report_window;
    let summary = exp::summarize(&cells, window);
    let table = exp::summary_csv(&summary, cfg.model.prompt_h);
    exp::write_tagged(&layout.results("tune_summary.csv"), &tag, &table)?;
    exp::write_tagged(&layout.results("tune_cells.csv"), &tag, &exp::cells_csv(&cells, window))?;
    for &(j, method, features) in summary.keys() {
        let group: Vec<_> = cells
            .iter()
            .filter(|c| (c.key.j, c.key.method, c.key.features) == (j, method, features))
            .cloned()
            .collect();
        let name = format!("history_{}_{method}_{features}.csv", exp::model_name(j));
        exp::write_tagged(&layout.results(&name), &tag, &exp::history_csv(&group))?;
    }
    print!("{table}");
    Ok(())
}

fn mixture_cells(levels: &[exp::MixtureLevel], window: usize) -> String {
    let mut out = String::from("expert_pct,method,features,seed,final_mean\n");
    for l in levels {
        for c in &l.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                l.expert_pct,
                c.key.method,
                c.key.features,
                c.key.seed,
                c.final_mean(window)
            ));
        }
    }
    out
}

fn plot(cfg: &ExperimentConfig, layout: &Layout, mut inputs: Vec<PathBuf>) -> Result<()> {
    if inputs.is_empty() {
        let dir = layout.root.join("results");
        if dir.is_dir() {
            for entry in std::fs::read_dir(&dir)? {
                let p = entry?.path();
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name.starts_with("history_") && name.ends_with(".csv") {
                    inputs.push(p);
                }
            }
        }
        inputs.sort();
        if inputs.is_empty() {
            return Err(Error::MissingInputs(vec![dir.join("history_*.csv")]));
        }
    }
    let missing: Vec<PathBuf> = inputs.iter().filter(|p| !p.exists()).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingInputs(missing));
    }
    let tag = exp::tag(cfg, cfg.seed);
    let plots = layout.root.join("results").join("plots");
    for input in &inputs {
        let rows = exp::parse_history_csv(&std::fs::read_to_string(input)?)?;
        let stem = stem(input);
        let curve = exp::learning_curve_svg(&stem, &[(stem.clone(), rows.clone())]);
        let scatter = exp::scatter_svg(&format!("{stem}: selected segments"), &rows);
        exp::write_svg(&plots.join(format!("{stem}_curve.svg")), &tag, &curve)?;
        exp::write_svg(&plots.join(format!("{stem}_scatter.svg")), &tag, &scatter)?;
        log(&format!("plotted {} ({} rows)", input.display(), rows.len()));
    }
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("history").to_string()
}
