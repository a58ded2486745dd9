//! CSV and SVG outputs. Every file starts with a provenance line naming the code
//! version, config hash and seed (a `#` comment in CSV, an XML comment in SVG).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::config::ExperimentConfig;
use super::run::{model_name, Aggregate, CellResult, MixtureLevel, OodReport, MIXTURE_METHODS, OOD_METHODS};
use crate::bandit::FeatureMode;
use crate::error::{Error, Result};
use crate::experiment::run::Method;

pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const OPTIMAL_RETURN: f64 = 10.0;

pub fn tag(cfg: &ExperimentConfig, seed: u64) -> String {
    format!(
        "pdtune {} schema={CSV_SCHEMA_VERSION} config={} seed={seed}",
        env!("CARGO_PKG_VERSION"),
        cfg.hash()
    )
}

/// Writes `# tag` followed by `body`.
pub fn write_tagged(path: &Path, tag: &str, body: &str) -> Result<()> {
    crate::io::write_atomic(path, format!("# {tag}\n{body}").as_bytes())
}

pub fn write_svg(path: &Path, tag: &str, svg: &str) -> Result<()> {
    let body = svg.replacen("<svg ", &format!("<!-- {tag} -->\n<svg "), 1);
    crate::io::write_atomic(path, body.as_bytes())
}

/// Long-format round log of cells that share one prompt size.
///
/// Columns: `task_id,seed,round`, then `slot_{s}_traj,slot_{s}_offset` per slot,
/// then `G,epsilon_or_ucb_bonus_scale,mean_x,mean_y,goal_x,goal_y`. The mean
/// coordinates are empty when there is no prompt.
pub fn history_csv(cells: &[CellResult]) -> String {
    let j = cells
        .iter()
        .find_map(|c| c.history.records.first())
        .map_or(0, |r| r.provenance.len());
    let mut out = String::from("task_id,seed,round");
    for s in 0..j {
        let _ = write!(out, ",slot_{s}_traj,slot_{s}_offset");
    }
    out.push_str(",G,epsilon_or_ucb_bonus_scale,mean_x,mean_y,goal_x,goal_y\n");
    for c in cells {
        for (r, xy) in c.history.records.iter().zip(&c.coords) {
            let _ = write!(out, "{},{},{}", c.key.task_id, c.key.seed, r.round);
            for (t, o) in &r.provenance {
                let _ = write!(out, ",{t},{o}");
            }
            let _ = write!(out, ",{},{}", r.g, r.scale);
            match xy {
                Some([x, y]) => {
                    let _ = write!(out, ",{x},{y}");
                }
                None => out.push_str(",,"),
            }
            let _ = writeln!(out, ",{},{}", c.goal[0], c.goal[1]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub task_id: usize,
    pub seed: u64,
    pub round: usize,
    pub g: f64,
    pub mean: Option<[f64; 2]>,
    pub goal: [f64; 2],
}

/// Parses [`history_csv`] output; `#` lines are skipped.
pub fn parse_history_csv(text: &str) -> Result<Vec<HistoryRow>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
    let Some((hn, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let cols: Vec<&str> = header.split(',').collect();
    let col = |name: &str| {
        cols.iter().position(|c| *c == name).ok_or_else(|| Error::Parse {
            line: hn + 1,
            msg: format!("missing column `{name}`"),
        })
    };
    let idx = [
        col("task_id")?,
        col("seed")?,
        col("round")?,
        col("G")?,
        col("mean_x")?,
        col("mean_y")?,
        col("goal_x")?,
        col("goal_y")?,
    ];
    let mut rows = Vec::new();
    for (n, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        let err = |msg: String| Error::Parse { line: n + 1, msg };
        if f.len() != cols.len() {
            return Err(err(format!("expected {} fields, found {}", cols.len(), f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|_| err(format!("bad number `{}` in column `{}`", f[i], cols[i])))
        };
        let int = |i: usize| -> Result<u64> {
            f[i].parse::<u64>()
                .map_err(|_| err(format!("bad integer `{}` in column `{}`", f[i], cols[i])))
        };
        let mean = if f[idx[4]].is_empty() && f[idx[5]].is_empty() {
            None
        } else {
            Some([num(idx[4])?, num(idx[5])?])
        };
        rows.push(HistoryRow {
            task_id: int(idx[0])? as usize,
            seed: int(idx[1])?,
            round: int(idx[2])? as usize,
            g: num(idx[3])?,
            mean,
            goal: [num(idx[6])?, num(idx[7])?],
        });
    }
    Ok(rows)
}

fn agg_fields(out: &mut String, a: &Aggregate) {
    let _ = write!(out, "{},{},{},{}", a.mean, a.std, a.seed_std, a.cells);
}

/// One row per `(model, method, features)`; mean and std over per-cell final-window means.
pub fn summary_csv(summary: &BTreeMap<(usize, Method, FeatureMode), Aggregate>, h: usize) -> String {
    let mut out = String::from("model,J,H,method,features,mean,std,seed_std,cells\n");
    for ((j, method, features), a) in summary {
        let _ = write!(out, "{},{j},{h},{method},{features},", model_name(*j));
        agg_fields(&mut out, a);
        out.push('\n');
    }
    out
}

/// Per-cell final-window means, sorted by cell key.
pub fn cells_csv(cells: &[CellResult], window: usize) -> String {
    let mut out = String::from("J,method,features,task_id,seed,final_mean\n");
    for c in cells {
        let k = c.key;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            k.j,
            k.method,
            k.features,
            k.task_id,
            k.seed,
            c.final_mean(window)
        );
    }
    out
}

pub fn mixture_csv(levels: &[MixtureLevel], window: usize) -> String {
    let mut out = String::from("expert_pct,no_tuning,eps_greedy,ucb,no_tuning_std,eps_greedy_std,ucb_std\n");
    for level in levels {
        let a: Vec<Aggregate> = MIXTURE_METHODS.iter().map(|&m| level.aggregate(m, window)).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            level.expert_pct, a[0].mean, a[1].mean, a[2].mean, a[0].std, a[1].std, a[2].std
        );
    }
    out
}

pub fn ood_csv(report: &OodReport, window: usize) -> String {
    let mut out = String::from("model,no_tuning,eps_greedy,no_tuning_std,eps_greedy_std\n");
    for (name, finetuned) in [("pretrained", false), ("finetuned", true)] {
        if finetuned && report.finetuned.is_empty() {
            continue;
        }
        let a: Vec<Aggregate> = OOD_METHODS
            .iter()
            .map(|&m| report.aggregate(finetuned, m, window))
            .collect();
        let _ = writeln!(out, "{name},{},{},{},{}", a[0].mean, a[1].mean, a[0].std, a[1].std);
    }
    out
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }

    fn axes(&self, svg: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
        let _ = writeln!(svg, r##"<rect x="0" y="0" width="{W}" height="{H}" fill="#ffffff"/>"##);
        let _ = writeln!(
            svg,
            r##"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="#222222" stroke-width="1"/>"##
        );
        for i in 0..=4 {
            let fx = self.x.0 + (self.x.1 - self.x.0) * i as f64 / 4.0;
            let fy = self.y.0 + (self.y.1 - self.y.0) * i as f64 / 4.0;
            let (x, y) = (self.px(fx), self.py(fy));
            let _ = writeln!(
                svg,
                r##"<line x1="{x:.2}" y1="{b}" x2="{x:.2}" y2="{:.2}" stroke="#222222"/><text x="{x:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"##,
                b + 4.0,
                b + 18.0,
                tick(fx)
            );
            let _ = writeln!(
                svg,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{l}" y2="{y:.2}" stroke="#222222"/><text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"##,
                l - 4.0,
                l - 7.0,
                y + 4.0,
                tick(fy)
            );
        }
        let _ = writeln!(
            svg,
            r##"<text x="{:.2}" y="24" font-size="15" text-anchor="middle">{}</text>"##,
            W / 2.0,
            escape(title)
        );
        let _ = writeln!(
            svg,
            r##"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"##,
            W / 2.0,
            H - 14.0,
            escape(xlabel)
        );
        let _ = writeln!(
            svg,
            r##"<text x="16" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"##,
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        );
    }
}

fn tick(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open_svg() -> String {
    format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">"#) + "\n"
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-9);
    (lo - 0.05 * span, hi + 0.05 * span)
}

/// Per-round mean and standard deviation of `G` across `(task, seed)` series.
pub fn curve(rows: &[HistoryRow]) -> Vec<(usize, f64, f64)> {
    let mut by_round: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_round.entry(r.round).or_default().push(r.g);
    }
    by_round
        .into_iter()
        .map(|(k, g)| {
            let (m, s) = super::run::mean_std(&g);
            (k, m, s)
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Learning curves (mean with a ±1 std band) with the optimal-return reference line.
pub fn learning_curve_svg(title: &str, series: &[(String, Vec<HistoryRow>)]) -> String {
    let curves: Vec<(&str, Vec<(usize, f64, f64)>)> =
        series.iter().map(|(name, rows)| (name.as_str(), curve(rows))).collect();
    let max_round = curves
        .iter()
        .flat_map(|(_, c)| c.last().map(|p| p.0))
        .max()
        .unwrap_or(1)
        .max(1);
    let (mut lo, mut hi) = (OPTIMAL_RETURN, OPTIMAL_RETURN);
    for (_, c) in &curves {
        for &(_, m, s) in c {
            lo = lo.min(m - s);
            hi = hi.max(m + s);
        }
    }
    if curves.iter().all(|(_, c)| c.is_empty()) {
        lo = OPTIMAL_RETURN - 20.0;
    }
    let frame = Frame {
        x: (0.0, max_round as f64),
        y: padded(lo, hi),
    };
    let mut svg = open_svg();
    frame.axes(&mut svg, title, "round", "return G");
    let ry = frame.py(OPTIMAL_RETURN);
    let _ = writeln!(
        svg,
        r##"<line x1="{MARGIN}" y1="{ry:.2}" x2="{:.2}" y2="{ry:.2}" stroke="#555555" stroke-dasharray="6 4"/>"##,
        W - MARGIN
    );
    for (i, (name, c)) in curves.iter().enumerate() {
        if c.is_empty() {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let mut band = String::new();
        for &(k, m, s) in c {
            let _ = write!(band, "{:.2},{:.2} ", frame.px(k as f64), frame.py(m + s));
        }
        for &(k, m, s) in c.iter().rev() {
            let _ = write!(band, "{:.2},{:.2} ", frame.px(k as f64), frame.py(m - s));
        }
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band.trim_end()
        );
        let line: Vec<String> = c
            .iter()
            .map(|&(k, m, _)| format!("{:.2},{:.2}", frame.px(k as f64), frame.py(m)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            line.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="{color}">{}</text>"#,
            MARGIN + 8.0,
            MARGIN + 14.0 * (i + 1) as f64,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn heat(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (40.0 + 215.0 * t).round() as u8;
    let b = (255.0 - 215.0 * t).round() as u8;
    format!("#{r:02x}40{b:02x}")
}

/// Selected-segment mean coordinates colored by return (blue low, red high), with the
/// start at the origin (square) and goals (crosses).
pub fn scatter_svg(title: &str, rows: &[HistoryRow]) -> String {
    let points: Vec<([f64; 2], f64)> = rows.iter().filter_map(|r| r.mean.map(|p| (p, r.g))).collect();
    let mut goals: Vec<[f64; 2]> = Vec::new();
    for r in rows {
        if !goals.contains(&r.goal) {
            goals.push(r.goal);
        }
    }
    let mut ext: f64 = 1.0;
    for p in points.iter().map(|p| p.0).chain(goals.iter().copied()) {
        ext = ext.max(p[0].abs()).max(p[1].abs());
    }
    let range = padded(-ext, ext);
    let frame = Frame { x: range, y: range };
    let mut svg = open_svg();
    frame.axes(&mut svg, title, "x", "y");
    let (gmin, gmax) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    for (p, g) in &points {
        let t = if gmax > gmin { (g - gmin) / (gmax - gmin) } else { 1.0 };
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.7"/>"#,
            frame.px(p[0]),
            frame.py(p[1]),
            heat(t)
        );
    }
    let (sx, sy) = (frame.px(0.0), frame.py(0.0));
    let _ = writeln!(
        svg,
        r##"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="#000000"/>"##,
        sx - 5.0,
        sy - 5.0
    );
    for g in &goals {
        let (x, y) = (frame.px(g[0]), frame.py(g[1]));
        let _ = writeln!(
            svg,
            r##"<path d="M{:.2} {:.2} L{:.2} {:.2} M{:.2} {:.2} L{:.2} {:.2}" stroke="#008800" stroke-width="2.5"/>"##,
            x - 6.0,
            y - 6.0,
            x + 6.0,
            y + 6.0,
            x - 6.0,
            y + 6.0,
            x + 6.0,
            y - 6.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
