//! Reports built from a ledger alone: comparison tables, trend series and
//! plots, Herdan series and the example-count experiment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{herdan_series, HerdanPoint};
use crate::stats::{date_from_years, ols_trend, predict_sota_date, wilcoxon_signed_rank, years_since_epoch, SotaPrediction, StatsError, TrendResult, WilcoxonResult};
use crate::store::{ensemble_trend, improving_ensembles, iso, trend_file_name, write_trend_csv, LoadReport, StoreError, TrendPoint};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("published data: {0}")]
    Published(String),
}

// ---------------------------------------------------------------------------
// Published comparison numbers
// ---------------------------------------------------------------------------

const PUBLISHED_JSON: &str = include_str!("../data/published.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedTrend {
    pub dataset: String,
    pub annual_improvement: f64,
    pub p_value: Option<f64>,
    pub sota: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Published {
    pub datasets: Vec<String>,
    /// Model name → one test score per dataset, lower is better.
    pub test_s: BTreeMap<String, Vec<f64>>,
    pub test_accuracy: BTreeMap<String, Vec<f64>>,
    pub trend: Vec<PublishedTrend>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PublishedRow {
    pub model: String,
    pub accuracy: f64,
    pub s: f64,
}

pub const PUBLISHED_ENSEMBLE_ROW: &str = "Most recent successful Narrative Learning ensemble";

/// Lower-case alphanumerics only, so `timetravel_insurance` and
/// `TimeTravel Insurance` meet.
pub fn dataset_key(name: &str) -> String {
    name.chars().filter(|c| c.is_ascii_alphanumeric()).map(|c| c.to_ascii_lowercase()).collect()
}

impl Published {
    pub fn bundled() -> Published {
        let p: Published = serde_json::from_str(PUBLISHED_JSON).expect("bundled published.json parses");
        p.check().expect("bundled published.json is consistent");
        p
    }

    pub fn check(&self) -> Result<(), ReportError> {
        let n = self.datasets.len();
        for (table, rows) in [("test_s", &self.test_s), ("test_accuracy", &self.test_accuracy)] {
            for (model, values) in rows {
                if values.len() != n {
                    return Err(ReportError::Published(format!("{table}/{model}: {} values for {n} datasets", values.len())));
                }
            }
        }
        if self.test_s.keys().ne(self.test_accuracy.keys()) {
            return Err(ReportError::Published("test_s and test_accuracy list different models".into()));
        }
        Ok(())
    }

    fn column(&self, dataset: &str) -> Option<usize> {
        let key = dataset_key(dataset);
        let aliases = [("timetravel", "timetravelinsurance"), ("southgerman", "southgermancredit"), ("magicpotions", "potions")];
        let key = aliases.iter().find(|(a, _)| *a == key).map_or(key.clone(), |(_, b)| b.to_string());
        self.datasets.iter().position(|d| *d == key)
    }

    pub fn rows_for(&self, dataset: &str) -> Vec<PublishedRow> {
        let Some(col) = self.column(dataset) else { return vec![] };
        self.test_s
            .iter()
            .map(|(model, s)| PublishedRow { model: model.clone(), s: s[col], accuracy: self.test_accuracy[model][col] })
            .collect()
    }

    pub fn trend_for(&self, dataset: &str) -> Option<&PublishedTrend> {
        let col = self.column(dataset)?;
        self.trend.iter().find(|t| t.dataset == self.datasets[col])
    }
}

// ---------------------------------------------------------------------------
// SVG
// ---------------------------------------------------------------------------

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub attrs: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotLine {
    pub class: String,
    pub from: (f64, f64),
    pub to: (f64, f64),
    pub label: Option<String>,
    pub attrs: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisStyle {
    Number,
    /// x values are years since the Unix epoch; ticks show dates.
    Date,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_axis: AxisStyle,
    pub points: Vec<PlotPoint>,
    pub lines: Vec<PlotLine>,
    /// Forced domains; otherwise fitted to the data with 5% padding.
    pub x_domain: Option<(f64, f64)>,
    pub y_domain: Option<(f64, f64)>,
}

pub const PLOT_WIDTH: f64 = 640.0;
pub const PLOT_HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 40.0, 60.0); // left, right, top, bottom

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn fmt_coord(v: f64) -> String {
    format!("{v:.3}")
}

fn tick_label(v: f64, style: AxisStyle) -> String {
    match style {
        AxisStyle::Number => {
            let s = format!("{v:.3}");
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        }
        AxisStyle::Date => date_from_years(v).map_or_else(String::new, |d| format!("{:04}-{:02}", d.year(), d.month())),
    }
}

impl Plot {
    fn domains(&self) -> ((f64, f64), (f64, f64)) {
        let xs = self.points.iter().map(|p| p.x).chain(self.lines.iter().flat_map(|l| [l.from.0, l.to.0]));
        let ys = self.points.iter().map(|p| p.y).chain(self.lines.iter().flat_map(|l| [l.from.1, l.to.1]));
        let span = |it: &mut dyn Iterator<Item = f64>| it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (x0, x1) = span(&mut xs.into_iter());
        let (y0, y1) = span(&mut ys.into_iter());
        (self.x_domain.unwrap_or_else(|| padded(x0, x1)), self.y_domain.unwrap_or_else(|| padded(y0, y1)))
    }

    pub fn render(&self) -> String {
        let ((x0, x1), (y0, y1)) = self.domains();
        let (ml, mr, mt, mb) = MARGIN;
        let (left, right, top, bottom) = (ml, PLOT_WIDTH - mr, mt, PLOT_HEIGHT - mb);
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * (right - left);
        let sy = |y: f64| bottom - (y - y0) / (y1 - y0) * (bottom - top);
        let attrs = |a: &[(String, String)]| a.iter().map(|(k, v)| format!(" data-{k}=\"{}\"", xml_escape(v))).collect::<String>();

        let mut s = String::new();
        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_WIDTH}\" height=\"{PLOT_HEIGHT}\" viewBox=\"0 0 {PLOT_WIDTH} {PLOT_HEIGHT}\" \
             data-x-min=\"{x0}\" data-x-max=\"{x1}\" data-y-min=\"{y0}\" data-y-max=\"{y1}\" \
             data-left=\"{left}\" data-right=\"{right}\" data-top=\"{top}\" data-bottom=\"{bottom}\">"
        );
        let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{PLOT_WIDTH}\" height=\"{PLOT_HEIGHT}\" fill=\"white\"/>");
        let _ = writeln!(s, "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>", PLOT_WIDTH / 2.0, xml_escape(&self.title));
        let _ = writeln!(s, "<g class=\"axes\" stroke=\"black\" stroke-width=\"1\">");
        let _ = writeln!(s, "<line x1=\"{left}\" y1=\"{bottom}\" x2=\"{right}\" y2=\"{bottom}\"/>");
        let _ = writeln!(s, "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{bottom}\"/>");
        let _ = writeln!(s, "</g>");
        let _ = writeln!(s, "<g class=\"ticks\" font-size=\"11\">");
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let (px, py) = (sx(xv), sy(yv));
            let _ = writeln!(s, "<line x1=\"{0}\" y1=\"{bottom}\" x2=\"{0}\" y2=\"{1}\" stroke=\"black\"/>", fmt_coord(px), bottom + 5.0);
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", fmt_coord(px), bottom + 18.0, xml_escape(&tick_label(xv, self.x_axis)));
            let _ = writeln!(s, "<line x1=\"{}\" y1=\"{1}\" x2=\"{left}\" y2=\"{1}\" stroke=\"black\"/>", left - 5.0, fmt_coord(py));
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", left - 8.0, fmt_coord(py + 4.0), xml_escape(&tick_label(yv, AxisStyle::Number)));
        }
        let _ = writeln!(s, "</g>");
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>", (left + right) / 2.0, PLOT_HEIGHT - 15.0, xml_escape(&self.x_label));
        let _ = writeln!(
            s,
            "<text x=\"18\" y=\"{0}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 18 {0})\">{1}</text>",
            (top + bottom) / 2.0,
            xml_escape(&self.y_label)
        );
        for l in &self.lines {
            let dash = if l.class == "fit" { "" } else { " stroke-dasharray=\"5,4\"" };
            let _ = writeln!(
                s,
                "<line class=\"{}\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"1.5\"{dash}{}/>",
                xml_escape(&l.class),
                fmt_coord(sx(l.from.0)),
                fmt_coord(sy(l.from.1)),
                fmt_coord(sx(l.to.0)),
                fmt_coord(sy(l.to.1)),
                if l.class == "fit" { "steelblue" } else { "gray" },
                attrs(&l.attrs)
            );
            if let Some(label) = &l.label {
                let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"gray\">{}</text>", fmt_coord(sx(l.to.0) - 60.0), fmt_coord(sy(l.to.1) - 3.0), xml_escape(label));
            }
        }
        for p in &self.points {
            let _ = writeln!(
                s,
                "<circle class=\"point\" cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"darkred\"{}/>",
                fmt_coord(sx(p.x)),
                fmt_coord(sy(p.y)),
                attrs(&p.attrs)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

// ---------------------------------------------------------------------------
// Per-dataset report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub dataset: String,
    pub trend_points: Vec<TrendPoint>,
    pub trend: Option<TrendResult>,
    /// Lowest live baseline test S, used as the state of the art to beat.
    pub best_baseline: Option<(String, f64)>,
    pub sota: Option<SotaPrediction>,
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

fn trend_plot(dataset: &str, summary: &DatasetSummary, baselines: &[(String, f64)]) -> Plot {
    let points: Vec<PlotPoint> = summary
        .trend_points
        .iter()
        .map(|p| PlotPoint {
            x: years_since_epoch(p.date),
            y: p.s,
            attrs: vec![("date".into(), iso(p.date)), ("s".into(), p.s.to_string()), ("model".into(), p.model.clone())],
        })
        .collect();
    let (xmin, xmax) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.x), b.max(p.x)));
    // An empty plot still gets a fixed, reproducible axis.
    let (xmin, xmax) = if points.is_empty() { (55.0, 56.0) } else { (xmin, xmax) };
    let x_domain = padded(xmin, xmax.max(xmin));
    let mut lines = vec![];
    if let Some(t) = &summary.trend {
        let f = |x: f64| t.intercept + t.slope_per_year * x;
        lines.push(PlotLine {
            class: "fit".into(),
            from: (x_domain.0, f(x_domain.0)),
            to: (x_domain.1, f(x_domain.1)),
            label: None,
            attrs: vec![("slope-per-year".into(), t.slope_per_year.to_string()), ("intercept".into(), t.intercept.to_string())],
        });
    }
    for (name, s) in baselines {
        lines.push(PlotLine {
            class: "baseline".into(),
            from: (x_domain.0, *s),
            to: (x_domain.1, *s),
            label: Some(name.clone()),
            attrs: vec![("model".into(), name.clone()), ("s".into(), s.to_string())],
        });
    }
    Plot {
        title: format!("{dataset}: ensemble test score over time"),
        x_label: "date of newest ensemble member".into(),
        y_label: "S = -log10 KT accuracy (lower is better)".into(),
        x_axis: AxisStyle::Date,
        points,
        lines,
        x_domain: Some(x_domain),
        y_domain: None,
    }
}

fn sota_text(s: &Option<SotaPrediction>) -> String {
    match s {
        None => "N/A".into(),
        Some(SotaPrediction::Never) => "never (trend not improving)".into(),
        Some(SotaPrediction::At { date }) => date.format("%Y-%m-%d").to_string(),
        Some(SotaPrediction::Already { crossing: Some(d) }) => format!("already ({})", d.format("%Y-%m-%d")),
        Some(SotaPrediction::Already { crossing: None }) => "already".into(),
    }
}

fn p_text(p: Option<f64>) -> String {
    match p {
        None => "N/A".into(),
        Some(0.0) => "0".into(),
        Some(p) => format!("{p:.2e}"),
    }
}

pub fn summarize_dataset(report: &LoadReport, dataset: &str) -> DatasetSummary {
    let trend_points = ensemble_trend(&report.ensembles, dataset);
    let series: Vec<(DateTime<Utc>, f64)> = trend_points.iter().map(|p| (p.date, p.s)).collect();
    let trend = ols_trend(&series).ok();
    let best_baseline = report
        .baselines
        .iter()
        .filter(|b| b.dataset == dataset)
        .map(|b| (b.model.name().to_string(), b.test_metrics.kt.s))
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let sota = match (&trend, &best_baseline, trend_points.last()) {
        (Some(t), Some((_, base)), Some(last)) => Some(predict_sota_date(t, last.date, last.s, *base)),
        _ => None,
    };
    DatasetSummary { dataset: dataset.to_string(), trend_points, trend, best_baseline, sota }
}

/// Markdown comparison table: live rows first, then published ones.
pub fn markdown_table(report: &LoadReport, dataset: &str, published: &Published) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "## {dataset}\n");
    let _ = writeln!(s, "Test-split scores. S is the negative log10 KT accuracy. Lower is better.\n");
    let _ = writeln!(s, "| Model | Accuracy | S | Source |");
    let _ = writeln!(s, "|---|---:|---:|---|");
    let mut baselines: Vec<_> = report.baselines.iter().filter(|b| b.dataset == dataset).collect();
    baselines.sort_by_key(|b| b.model);
    for b in baselines {
        let _ = writeln!(s, "| {} | {} | {} | live |", b.model.name(), fmt3(b.test_metrics.accuracy), fmt3(b.test_metrics.kt.s));
    }
    if let Some(p) = ensemble_trend(&report.ensembles, dataset).last() {
        let _ = writeln!(s, "| narrative ensemble, latest ({}) | {} | {} | live |", p.model, fmt3(p.accuracy), fmt3(p.s));
    }
    for row in published.rows_for(dataset) {
        let _ = writeln!(s, "| {} | {} | {} | [published] |", row.model, fmt3(row.accuracy), fmt3(row.s));
    }
    s
}

/// Writes the per-dataset tables, trend CSV/SVG and Herdan series, plus a
/// summary of trend statistics; returns the paths written. Output depends
/// only on `report`.
pub fn render_report(report: &LoadReport, out: &Path, published: &Published) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(out)?;
    let mut written = vec![];
    let datasets: BTreeSet<&str> = report
        .runs
        .iter()
        .map(|r| r.dataset.as_str())
        .chain(report.ensembles.iter().map(|e| e.dataset.as_str()))
        .chain(report.baselines.iter().map(|b| b.dataset.as_str()))
        .collect();

    let mut summary_md = String::from("# Trend summary\n\n");
    summary_md.push_str("Annual improvement is the yearly decrease of ensemble test S; the p-value tests a nonzero slope.\n\n");
    summary_md.push_str("| Dataset | Points | Annual improvement | Trend p-value | SOTA date | Source |\n|---|---:|---:|---:|---|---|\n");

    for ds in &datasets {
        let summary = summarize_dataset(report, ds);
        let stem = trend_file_name(ds);
        let stem = stem.trim_end_matches(".csv");

        let md_path = out.join(format!("{}.md", stem.replacen("trend_", "tables_", 1)));
        fs::write(&md_path, markdown_table(report, ds, published))?;
        written.push(md_path);

        let csv_path = out.join(format!("{stem}.csv"));
        write_trend_csv(&summary.trend_points, fs::File::create(&csv_path)?)?;
        written.push(csv_path);

        let baselines: Vec<(String, f64)> = {
            let mut b: Vec<_> = report.baselines.iter().filter(|b| b.dataset == *ds).map(|b| (b.model.name().to_string(), b.test_metrics.kt.s)).collect();
            b.sort_by(|x, y| x.0.cmp(&y.0));
            b
        };
        let svg_path = out.join(format!("{stem}.svg"));
        fs::write(&svg_path, trend_plot(ds, &summary, &baselines).render())?;
        written.push(svg_path);

        let herdan = herdan_points(report, ds);
        let h_path = out.join(format!("{}.csv", stem.replacen("trend_", "herdan_", 1)));
        write_herdan_csv(&herdan, fs::File::create(&h_path)?)?;
        written.push(h_path);

        let (imp, p) = summary.trend.as_ref().map_or(("N/A".into(), "N/A".into()), |t| (fmt3(t.annual_improvement()), p_text(t.p_value)));
        let _ = writeln!(summary_md, "| {ds} | {} | {imp} | {p} | {} | live |", summary.trend_points.len(), sota_text(&summary.sota));
        if let Some(t) = published.trend_for(ds) {
            let _ = writeln!(
                summary_md,
                "| {ds} | | {} | {} | {} | [published] |",
                fmt3(t.annual_improvement),
                t.p_value.map_or("N/A".into(), |p| p.to_string()),
                t.sota
            );
        }
    }
    let path = out.join("summary.md");
    fs::write(&path, summary_md)?;
    written.push(path);
    Ok(written)
}

/// Pooled prompts and pooled reasoning of each improving ensemble's
/// members, fitted as two separate series.
pub fn herdan_points(report: &LoadReport, dataset: &str) -> Vec<HerdanPoint> {
    let mut items = vec![];
    for e in improving_ensembles(&report.ensembles, dataset) {
        let members: Vec<_> = e
            .member_run_ids
            .iter()
            .filter_map(|id| report.run(id))
            .filter_map(|r| r.rounds.get(e.member_round_indices[e.member_run_ids.iter().position(|m| *m == r.run_id).unwrap()]))
            .collect();
        let prompts: Vec<&str> = members.iter().map(|r| r.prompt.as_str()).collect();
        let narrations: Vec<&str> = members.iter().map(|r| r.narration.as_str()).collect();
        items.push((e.date, "prompt".to_string(), prompts.join("\n")));
        items.push((e.date, "reasoning".to_string(), narrations.join("\n")));
    }
    herdan_series(&items)
}

pub fn write_herdan_csv<W: std::io::Write>(points: &[HerdanPoint], w: W) -> Result<(), ReportError> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["date", "series", "beta", "k", "n_tokens"])?;
    for p in points {
        c.write_record([iso(p.date), p.series.clone(), p.beta.to_string(), p.k.to_string(), p.n_tokens.to_string()])?;
    }
    c.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Example-count experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    pub low_accuracy: f64,
    pub high_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ExampleCountOutcome {
    Tested { result: WilcoxonResult },
    /// Nothing to test, e.g. every pair tied.
    NoEvidence { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleCountReport {
    pub low_k: usize,
    pub high_k: usize,
    pub pairs: Vec<ExamplePair>,
    pub excluded: Vec<String>,
    pub outcome: ExampleCountOutcome,
}

/// Pairs finished runs that differ only in examples per quadrant, on
/// matched (dataset, overseer model, seed), by final test accuracy.
pub fn example_count_experiment(report: &LoadReport, low_k: usize, high_k: usize) -> ExampleCountReport {
    // (dataset, model, seed) -> k -> [(run id, test accuracy)]
    type Arms<'a> = BTreeMap<usize, Vec<(&'a str, f64)>>;
    let mut groups: BTreeMap<(String, String, u64), Arms> = BTreeMap::new();
    let mut excluded = vec![];
    for r in &report.runs {
        let k = r.config.examples_per_quadrant;
        if k != low_k && k != high_k {
            continue;
        }
        let Some(t) = report.tests.get(&r.run_id) else {
            excluded.push(format!("{}: no test evaluation", r.run_id));
            continue;
        };
        groups
            .entry((r.dataset.clone(), r.overseer_model().to_string(), r.config.seed))
            .or_default()
            .entry(k)
            .or_default()
            .push((&r.run_id, t.metrics.accuracy));
    }
    let mut pairs = vec![];
    for ((dataset, model, seed), arms) in groups {
        let low = arms.get(&low_k).map(Vec::as_slice).unwrap_or_default();
        let high = arms.get(&high_k).map(Vec::as_slice).unwrap_or_default();
        match (low, high) {
            ([(_, a)], [(_, b)]) => pairs.push(ExamplePair { dataset, model, seed, low_accuracy: *a, high_accuracy: *b }),
            _ => {
                let ids: Vec<&str> = low.iter().chain(high).map(|(id, _)| *id).collect();
                excluded.push(format!(
                    "{dataset}/{model}/seed {seed}: {} run(s) at k={low_k}, {} at k={high_k}; unpaired ({})",
                    low.len(),
                    high.len(),
                    ids.join(", ")
                ));
            }
        }
    }
    let diffs: Vec<(f64, f64)> = pairs.iter().map(|p| (p.high_accuracy, p.low_accuracy)).collect();
    let outcome = match wilcoxon_signed_rank(&diffs) {
        _ if pairs.is_empty() => ExampleCountOutcome::NoEvidence { reason: "no paired runs".into() },
        Ok(result) => ExampleCountOutcome::Tested { result },
        Err(StatsError::AllZeroDifferences) => ExampleCountOutcome::NoEvidence { reason: "every pair has equal accuracy".into() },
        Err(e) => ExampleCountOutcome::NoEvidence { reason: e.to_string() },
    };
    ExampleCountReport { low_k, high_k, pairs, excluded, outcome }
}

impl ExampleCountReport {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), ReportError> {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["dataset", "model", "seed", &format!("accuracy_k{}", self.low_k), &format!("accuracy_k{}", self.high_k)])?;
        for p in &self.pairs {
            c.write_record([p.dataset.clone(), p.model.clone(), p.seed.to_string(), p.low_accuracy.to_string(), p.high_accuracy.to_string()])?;
        }
        c.flush()?;
        Ok(())
    }

    pub fn plot(&self) -> Plot {
        let (lo, hi) = self
            .pairs
            .iter()
            .flat_map(|p| [p.low_accuracy, p.high_accuracy])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let domain = if self.pairs.is_empty() { (0.0, 1.0) } else { padded(lo, hi) };
        Plot {
            title: format!("Test accuracy: {} vs {} examples per quadrant", self.high_k, self.low_k),
            x_label: format!("accuracy with {} examples", self.low_k),
            y_label: format!("accuracy with {} examples", self.high_k),
            x_axis: AxisStyle::Number,
            points: self
                .pairs
                .iter()
                .map(|p| PlotPoint {
                    x: p.low_accuracy,
                    y: p.high_accuracy,
                    attrs: vec![("dataset".into(), p.dataset.clone()), ("model".into(), p.model.clone()), ("seed".into(), p.seed.to_string())],
                })
                .collect(),
            lines: vec![PlotLine { class: "diagonal".into(), from: (domain.0, domain.0), to: (domain.1, domain.1), label: Some("y = x".into()), attrs: vec![] }],
            x_domain: Some(domain),
            y_domain: Some(domain),
        }
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} pairs (k={} vs k={}), {} excluded\n", self.pairs.len(), self.low_k, self.high_k, self.excluded.len());
        match &self.outcome {
            ExampleCountOutcome::Tested { result } => {
                let _ = writeln!(s, "Wilcoxon W+={} W-={} n={} p={:.4} ({:?})", result.w_plus, result.w_minus, result.n_effective, result.p_value, result.method);
            }
            ExampleCountOutcome::NoEvidence { reason } => {
                let _ = writeln!(s, "no evidence either way: {reason}");
            }
        }
        for e in &self.excluded {
            let _ = writeln!(s, "excluded {e}");
        }
        s
    }
}
