//! Label-budget experiment matrix: every (budget, mode, seed) cell is trained
//! and evaluated on the validation split.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, LoadedData};
use crate::data::{LabelBudget, Mode};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, fmt_hd, fmt_value, Aggregate};
use crate::model::ModelConfig;
use crate::trainer::{config_hash, train, LogRow, RunOutput, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub budgets: Vec<LabelBudget>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    /// Run cells concurrently. Results do not depend on this.
    pub parallel: bool,
    pub model: ModelConfig,
    /// Base training settings; each cell overrides mode, budget and seed.
    pub train: TrainConfig,
    pub data: DataSource,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "label-budget".into(),
            budgets: vec![
                LabelBudget::Count(25),
                LabelBudget::Count(50),
                LabelBudget::All,
            ],
            modes: vec![Mode::Fully, Mode::Semi],
            seeds: vec![0],
            parallel: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataSource::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub budget: LabelBudget,
    pub mode: Mode,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("{}-{}-seed{}", self.budget, self.mode, self.seed)
    }
}

fn no_duplicates<T: Ord + Clone>(what: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Config(format!(
            "experiment needs at least one entry in {what}"
        )));
    }
    if v.iter().cloned().collect::<BTreeSet<_>>().len() != v.len() {
        return Err(Error::Config(format!("duplicate entries in {what}")));
    }
    Ok(())
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        no_duplicates("budgets", &self.budgets)?;
        no_duplicates("modes", &self.modes)?;
        no_duplicates("seeds", &self.seeds)?;
        self.model.validate()?;
        for m in &self.modes {
            TrainConfig {
                mode: *m,
                ..self.train.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    /// Budgets outermost, then modes, then seeds, in spec order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &budget in &self.budgets {
            for &mode in &self.modes {
                for &seed in &self.seeds {
                    out.push(Cell { budget, mode, seed });
                }
            }
        }
        out
    }

    pub fn cell_config(&self, cell: &Cell) -> TrainConfig {
        TrainConfig {
            mode: cell.mode,
            label_budget: cell.budget,
            seed: cell.seed,
            ..self.train.clone()
        }
    }

    pub fn hash(&self) -> String {
        crate::trainer::bytes_hash(&serde_json::to_vec(self).expect("spec serializes"))
    }
}

#[derive(Clone, Debug)]
pub struct ResultRow {
    pub cell: Cell,
    pub metrics: Aggregate,
    pub log: Vec<LogRow>,
}

#[derive(Clone, Debug)]
pub struct CellFailure {
    pub cell: Cell,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
    pub spec_hash: String,
    pub code_version: String,
}

pub const RESULTS_HEADER: &str = "budget,mode,seed,dice,miou,sensitivity,precision,hd";

impl ExperimentResult {
    pub fn results_csv(&self) -> String {
        let mut s = format!("{RESULTS_HEADER}\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.cell.budget,
                r.cell.mode,
                r.cell.seed,
                fmt_value(m.dice),
                fmt_value(m.miou),
                fmt_value(m.sensitivity),
                fmt_value(m.precision),
                fmt_hd(m.hd)
            );
        }
        s
    }

    /// Seed-averaged rows, one per (budget, mode) in first-seen order.
    pub fn grouped(&self) -> Vec<GroupSummary> {
        let mut out: Vec<GroupSummary> = Vec::new();
        for r in &self.rows {
            let key = (r.cell.budget, r.cell.mode);
            match out.iter_mut().find(|g| (g.budget, g.mode) == key) {
                Some(g) => g.rows.push(r.metrics.clone()),
                None => out.push(GroupSummary {
                    budget: key.0,
                    mode: key.1,
                    rows: vec![r.metrics.clone()],
                }),
            }
        }
        out
    }

    pub fn mean_dice(&self, budget: LabelBudget, mode: Mode) -> Option<f64> {
        self.grouped()
            .into_iter()
            .find(|g| g.budget == budget && g.mode == mode)
            .map(|g| g.mean(|a| Some(a.dice)).0)
    }

    pub fn summary_markdown(&self, name: &str) -> String {
        let mut s = format!("# {name}\n\nValidation metrics, mean ± sd over seeds.\n\n");
        s.push_str("| budget | mode | seeds | Dice | mIoU | Sensitivity | Precision | HD |\n");
        s.push_str("|---|---|---|---|---|---|---|---|\n");
        for g in self.grouped() {
            let cell = |f: fn(&Aggregate) -> Option<f64>| {
                let (m, sd, n) = g.mean(f);
                if n == 0 {
                    "NA".to_string()
                } else {
                    format!("{m:.4} ± {sd:.4}")
                }
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                g.budget,
                g.mode,
                g.rows.len(),
                cell(|a| Some(a.dice)),
                cell(|a| Some(a.miou)),
                cell(|a| Some(a.sensitivity)),
                cell(|a| Some(a.precision)),
                cell(|a| a.hd)
            );
        }
        if !self.failures.is_empty() {
            let _ = writeln!(
                s,
                "\n{} cell(s) failed; see failures.txt.",
                self.failures.len()
            );
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct GroupSummary {
    pub budget: LabelBudget,
    pub mode: Mode,
    pub rows: Vec<Aggregate>,
}

impl GroupSummary {
    /// Mean, sample standard deviation and count of the defined values.
    pub fn mean(&self, f: impl Fn(&Aggregate) -> Option<f64>) -> (f64, f64, usize) {
        let v: Vec<f64> = self.rows.iter().filter_map(f).collect();
        let n = v.len();
        if n == 0 {
            return (f64::NAN, f64::NAN, 0);
        }
        let m = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        (m, var.sqrt(), n)
    }
}

fn run_cell(
    spec: &ExperimentSpec,
    data: &LoadedData,
    cell: &Cell,
    out: Option<&Path>,
) -> Result<ResultRow> {
    let config = spec.cell_config(cell);
    let dir = out.map(|o| o.join("cells").join(cell.dir_name()));
    let outcome = train(
        &spec.model,
        &config,
        &data.split.train,
        RunOutput {
            dir: dir.as_deref(),
            data_hash: data.data_hash.as_deref(),
        },
    )?;
    let report = evaluate(&outcome.checkpoint, &data.split.val)?;
    if let Some(d) = &dir {
        let p = d.join("metrics.csv");
        fs::write(&p, report.to_csv()).map_err(|e| Error::io(&p, e))?;
    }
    log::info!(
        "cell {}: dice {:.4}",
        cell.dir_name(),
        report.aggregate.dice
    );
    Ok(ResultRow {
        cell: *cell,
        metrics: report.aggregate,
        log: outcome.log,
    })
}

/// Runs every cell. A failing cell is recorded and the rest still run.
pub fn run_experiment(spec: &ExperimentSpec, out: Option<&Path>) -> Result<ExperimentResult> {
    spec.validate()?;
    let data = spec.data.load()?;
    if data.split.val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let cells = spec.cells();
    let run = |cell: &Cell| run_cell(spec, &data, cell, out);
    let outcomes: Vec<Result<ResultRow>> = if spec.parallel {
        cells.par_iter().map(run).collect()
    } else {
        cells.iter().map(run).collect()
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (cell, o) in cells.iter().zip(outcomes) {
        match o {
            Ok(r) => rows.push(r),
            Err(e) => {
                log::error!("cell {} failed: {e}", cell.dir_name());
                failures.push(CellFailure {
                    cell: *cell,
                    error: e.to_string(),
                });
            }
        }
    }
    let result = ExperimentResult {
        rows,
        failures,
        spec_hash: spec.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    if let Some(dir) = out {
        write_artifacts(spec, &result, dir)?;
    }
    Ok(result)
}

#[derive(Serialize)]
struct Provenance<'a> {
    name: &'a str,
    spec_hash: &'a str,
    code_version: &'a str,
    model_config_hashes: Vec<(String, String)>,
    cells: usize,
    failed: usize,
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn write_artifacts(spec: &ExperimentSpec, result: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir, "results.csv", &result.results_csv())?;
    write(dir, "summary.md", &result.summary_markdown(&spec.name))?;
    write(dir, "spec.toml", &crate::config::to_toml_string(spec)?)?;
    let failures: String = result
        .failures
        .iter()
        .map(|f| format!("{}\t{}\n", f.cell.dir_name(), f.error))
        .collect();
    write(dir, "failures.txt", &failures)?;
    let prov = Provenance {
        name: &spec.name,
        spec_hash: &result.spec_hash,
        code_version: &result.code_version,
        model_config_hashes: spec
            .cells()
            .iter()
            .map(|c| (c.dir_name(), config_hash(&spec.model, &spec.cell_config(c))))
            .collect(),
        cells: spec.cells().len(),
        failed: result.failures.len(),
    };
    write(
        dir,
        "provenance.json",
        &(serde_json::to_string_pretty(&prov)? + "\n"),
    )?;
    write(dir, "loss_curves.svg", &loss_chart(result).render())?;
    write(
        dir,
        "dice_by_budget.svg",
        &dice_chart(spec, result).render(),
    )?;
    Ok(())
}

fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len());
    let mut sum = 0.0;
    for i in 0..v.len() {
        sum += v[i];
        if i >= window {
            sum -= v[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

fn loss_chart(result: &ExperimentResult) -> svg::LineChart {
    let series = result
        .rows
        .iter()
        .map(|r| {
            let sup: Vec<f64> = r.log.iter().map(LogRow::supervised).collect();
            let smooth = moving_average(&sup, 25);
            svg::Series {
                name: r.cell.dir_name(),
                points: r
                    .log
                    .iter()
                    .zip(smooth)
                    .map(|(l, s)| (l.iteration as f64, s))
                    .collect(),
            }
        })
        .collect();
    svg::LineChart {
        title: "Supervised loss (CE + Dice), moving average".into(),
        x_label: "iteration".into(),
        y_label: "loss".into(),
        x_categories: None,
        series,
    }
}

fn dice_chart(spec: &ExperimentSpec, result: &ExperimentResult) -> svg::LineChart {
    let series = spec
        .modes
        .iter()
        .map(|&mode| svg::Series {
            name: mode.to_string(),
            points: spec
                .budgets
                .iter()
                .enumerate()
                .filter_map(|(i, &b)| result.mean_dice(b, mode).map(|d| (i as f64, d)))
                .collect(),
        })
        .collect();
    svg::LineChart {
        title: "Validation Dice by label budget".into(),
        x_label: "labels".into(),
        y_label: "Dice".into(),
        x_categories: Some(spec.budgets.iter().map(|b| b.to_string()).collect()),
        series,
    }
}

mod svg {
    use std::fmt::Write as _;

    const PALETTE: [&str; 8] = [
        "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
    ];

    pub struct Series {
        pub name: String,
        pub points: Vec<(f64, f64)>,
    }

    pub struct LineChart {
        pub title: String,
        pub x_label: String,
        pub y_label: String,
        pub x_categories: Option<Vec<String>>,
        pub series: Vec<Series>,
    }

    fn escape(s: &str) -> String {
        s.replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;")
    }

    impl LineChart {
        pub fn render(&self) -> String {
            let (w, h) = (720.0, 440.0);
            let (left, right, top, bottom) = (64.0, 180.0, 36.0, 48.0);
            let pw = w - left - right;
            let ph = h - top - bottom;
            let pts = self.series.iter().flat_map(|s| s.points.iter());
            let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for &(x, y) in pts {
                if x.is_finite() && y.is_finite() {
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
            }
            if x0 > x1 {
                (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
            }
            if x1 - x0 < 1e-12 {
                x1 = x0 + 1.0;
            }
            if y1 - y0 < 1e-12 {
                y1 = y0 + 1.0;
            }
            let pad = 0.05 * (y1 - y0);
            let (y0, y1) = (y0 - pad, y1 + pad);
            let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
            let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

            let mut s = String::new();
            let _ = writeln!(
                s,
                r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
            );
            let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
            let _ = writeln!(
                s,
                r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
                left + pw / 2.0,
                escape(&self.title)
            );
            let _ = writeln!(
                s,
                r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
            );
            for i in 0..=4 {
                let y = y0 + (y1 - y0) * i as f64 / 4.0;
                let _ = writeln!(
                    s,
                    r##"<line x1="{left}" x2="{}" y1="{py:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{y:.3}</text>"##,
                    left + pw,
                    left - 4.0,
                    sy(y) + 4.0,
                    py = sy(y)
                );
            }
            match &self.x_categories {
                Some(cats) => {
                    for (i, c) in cats.iter().enumerate() {
                        let _ = writeln!(
                            s,
                            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                            sx(i as f64),
                            top + ph + 16.0,
                            escape(c)
                        );
                    }
                }
                None => {
                    for i in 0..=4 {
                        let x = x0 + (x1 - x0) * i as f64 / 4.0;
                        let _ = writeln!(
                            s,
                            r#"<text x="{:.1}" y="{}" text-anchor="middle">{x:.0}</text>"#,
                            sx(x),
                            top + ph + 16.0
                        );
                    }
                }
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                left + pw / 2.0,
                h - 10.0,
                escape(&self.x_label)
            );
            let _ = writeln!(
                s,
                r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
                top + ph / 2.0,
                top + ph / 2.0,
                escape(&self.y_label)
            );
            for (k, series) in self.series.iter().enumerate() {
                let color = PALETTE[k % PALETTE.len()];
                let path: Vec<String> = series
                    .points
                    .iter()
                    .filter(|(x, y)| x.is_finite() && y.is_finite())
                    .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    path.join(" ")
                );
                let ly = top + 12.0 + 16.0 * k as f64;
                let _ = writeln!(
                    s,
                    r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                    left + pw + 10.0,
                    left + pw + 28.0,
                    left + pw + 32.0,
                    ly + 4.0,
                    escape(&series.name)
                );
            }
            s.push_str("</svg>\n");
            s
        }
    }
}
