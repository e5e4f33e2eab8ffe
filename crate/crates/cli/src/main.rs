use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::json;

use narrative_core::baselines::{run_baseline, BaselineKind};
use narrative_core::data::{
    load_dataset, sidecar_for, split_dataset, write_csv_dataset, DataFormat, Dataset, LoadOptions, SchemaSidecar, SplitAssignment,
    SplitRatios,
};
use narrative_core::ensemble::{evaluate_ensemble, select_best_triple, EnsembleSelection};
use narrative_core::gateway::{Gateway, ResponseCache};
use narrative_core::lexicon::{herdan_text, herdan_trend};
use narrative_core::obfuscate::{apply_transforms, invert_narrative, parse_transform_spec};
use narrative_core::report::{example_count_experiment, herdan_points, render_report, write_herdan_csv, Published};
use narrative_core::stats::{ols_trend, predict_sota_date, wilcoxon_signed_rank};
use narrative_core::store::{export_csv, load, read_trend_csv, Ledger, LoadReport, RunFilter};
use narrative_core::synth::{generate, verify_stats, SynthConfig};
use narrative_core::trainer::{evaluate_on_test, RunRecord, SystemClock, Trainer, TrainerConfig};

#[derive(Parser)]
#[command(name = "narrate", version, about = "Train, ensemble and report on natural-language classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-feature dataset
    Synth(SynthArgs),
    /// Apply a transform spec to mask a dataset
    Obfuscate(ObfuscateArgs),
    /// Translate text about a masked dataset back to original names and units
    Untranslate(UntranslateArgs),
    /// Write a stratified train/validation/test split
    Split(SplitArgs),
    /// Train one narrative run, resuming it from the ledger if unfinished
    Train(TrainArgs),
    /// Select and score the best three-run majority vote
    Ensemble(EnsembleArgs),
    /// Fit conventional baselines
    Baseline(BaselineArgs),
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Lexical-richness series of improving ensembles
    Herdan(HerdanArgs),
    /// Tables, trend CSVs and SVG plots for every dataset in the ledger
    Report(LedgerOut),
    /// Dump the ledger as flat CSV files
    Export(LedgerOut),
}

#[derive(Args)]
struct DatasetArgs {
    /// CSV file; a `<stem>.schema.json` next to it is used when present
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    id_column: Option<String>,
    #[arg(long)]
    positive_label: Option<String>,
    /// Schema sidecar JSON (column kinds, target, positive label)
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Dataset name; defaults to the file stem
    #[arg(long)]
    name: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Espionage,
    Timetravel,
    Potions,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, conflicts_with = "config")]
    preset: Option<Preset>,
    /// SynthConfig JSON
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    rows: Option<usize>,
    /// Output CSV; the schema sidecar and boundary are written beside it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ObfuscateArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UntranslateArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, conflicts_with = "input")]
    text: Option<String>,
    /// File to translate; stdin when neither this nor --text is given
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct SplitFlags {
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Saved split JSON; overrides --split-seed
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    split: SplitFlags,
    /// TrainerConfig JSON with `overseer` and `underling` provider configs
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ledger: PathBuf,
    /// Response cache directory
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    examples: Option<usize>,
    #[arg(long)]
    max_rounds: Option<usize>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    run_id: Option<String>,
    /// Skip scoring the best round on the test split
    #[arg(long)]
    no_test: bool,
}

#[derive(Args)]
struct EnsembleArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long)]
    ledger: PathBuf,
    /// Only runs trained on this split seed
    #[arg(long)]
    split_seed: Option<u64>,
    /// TrainerConfig JSON whose underling re-scores rows lacking stored predictions
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    concurrency: usize,
    /// Also record the best ensemble available after each run, in creation order
    #[arg(long)]
    history: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineChoice {
    Dummy,
    Logreg,
    Tree,
    All,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    split: SplitFlags,
    #[arg(long, value_enum, default_value = "all")]
    kind: BaselineChoice,
    /// Record results here
    #[arg(long)]
    ledger: Option<PathBuf>,
}

#[derive(Subcommand)]
enum StatsCommand {
    /// OLS trend of a trend CSV (date,model,S,accuracy)
    Trend {
        #[arg(long)]
        csv: PathBuf,
        /// Best baseline S, to project when the trend beats it
        #[arg(long)]
        baseline: Option<f64>,
    },
    /// Signed-rank test on a CSV of paired columns `a,b`
    Wilcoxon {
        #[arg(long)]
        csv: PathBuf,
    },
    /// Herdan fit of one text
    Herdan {
        #[arg(long, conflicts_with = "input")]
        text: Option<String>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Paired comparison of runs with few versus many examples per quadrant
    ExampleCount {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long, default_value_t = 3)]
        low: usize,
        #[arg(long, default_value_t = 10)]
        high: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct HerdanArgs {
    #[arg(long)]
    ledger: PathBuf,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LedgerOut {
    #[arg(long)]
    ledger: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Obfuscate(a) => obfuscate(a),
        Command::Untranslate(a) => untranslate(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Baseline(a) => baseline(a),
        Command::Stats(s) => stats(s),
        Command::Herdan(a) => herdan(a),
        Command::Report(a) => {
            let report = load_ledger(&a.ledger, &RunFilter::default())?;
            for p in render_report(&report, &a.out, &Published::bundled())? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Export(a) => {
            let report = load_ledger(&a.ledger, &RunFilter::default())?;
            for p in export_csv(&report, &a.out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("schema.json")
}

fn load_data(a: &DatasetArgs) -> Result<Dataset> {
    let schema: Option<SchemaSidecar> = match &a.schema {
        Some(p) => Some(read_json(p)?),
        None => {
            let p = sidecar_path(&a.dataset);
            if p.exists() {
                Some(read_json(&p)?)
            } else {
                None
            }
        }
    };
    let opts = LoadOptions {
        name: a.name.clone(),
        target: a.target.clone(),
        id_column: a.id_column.clone(),
        positive_label: a.positive_label.clone(),
        schema,
    };
    load_dataset(&a.dataset, DataFormat::Csv, &opts).with_context(|| format!("loading {}", a.dataset.display()))
}

fn write_dataset(ds: &Dataset, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_csv_dataset(ds, fs::File::create(out).with_context(|| format!("creating {}", out.display()))?)?;
    write_json(&sidecar_path(out), &sidecar_for(ds))
}

fn resolve_split(ds: &Dataset, flags: &SplitFlags) -> Result<SplitAssignment> {
    match &flags.split {
        Some(p) => {
            let s: SplitAssignment = read_json(p)?;
            s.check_against(ds)?;
            Ok(s)
        }
        None => Ok(split_dataset(ds, SplitRatios::default(), flags.split_seed)?),
    }
}

fn load_ledger(dir: &Path, filter: &RunFilter) -> Result<LoadReport> {
    let report = load(dir, filter)?;
    for p in &report.problems {
        warn!("ledger: {p}");
    }
    Ok(report)
}

fn open_cache(dir: &Option<PathBuf>) -> Result<Option<Arc<ResponseCache>>> {
    dir.as_ref().map(|d| Ok(Arc::new(ResponseCache::open(d)?))).transpose()
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match (&a.config, a.preset) {
        (Some(p), _) => read_json::<SynthConfig>(p)?,
        (None, Some(Preset::Espionage)) => SynthConfig::espionage(a.seed),
        (None, Some(Preset::Timetravel)) => SynthConfig::timetravel_insurance(a.seed),
        (None, Some(Preset::Potions)) => SynthConfig::potions(a.seed),
        (None, None) => bail!("give --preset or --config"),
    };
    if a.config.is_none() {
        cfg.seed = a.seed;
    }
    if let Some(n) = a.rows {
        cfg.n = n;
    }
    let data = generate(&cfg)?;
    write_dataset(&data.dataset, &a.out)?;
    write_json(&a.out.with_extension("boundary.json"), &data.boundary)?;
    let check = verify_stats(&data.dataset, &cfg);
    print_json(&json!({
        "dataset": data.dataset.name,
        "rows": data.dataset.rows.len(),
        "flipped": data.flipped.len(),
        "checks": check,
        "out": a.out,
    }))
}

fn obfuscate(a: ObfuscateArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let spec = parse_transform_spec(&fs::read_to_string(&a.spec)?)?;
    let masked = apply_transforms(&ds, &spec)?;
    write_dataset(&masked, &a.out)?;
    info!("wrote {} rows, {} columns to {}", masked.rows.len(), masked.schema.len(), a.out.display());
    Ok(())
}

fn read_text(text: &Option<String>, input: &Option<PathBuf>) -> Result<String> {
    Ok(match (text, input) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => fs::read_to_string(p)?,
        (None, None) => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            s
        }
    })
}

fn untranslate(a: UntranslateArgs) -> Result<()> {
    let spec = parse_transform_spec(&fs::read_to_string(&a.spec)?)?;
    println!("{}", invert_narrative(&read_text(&a.text, &a.input)?, &spec));
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let s = split_dataset(&ds, SplitRatios::default(), a.split_seed)?;
    write_json(&a.out, &s)?;
    print_json(&json!({"train": s.train.len(), "validation": s.validation.len(), "test": s.test.len(), "seed": s.seed}))
}

fn interrupt_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        if !f.swap(true, Ordering::SeqCst) {
            eprintln!("interrupt: stopping after the current round");
        }
    }) {
        warn!("cannot install interrupt handler: {e}");
    }
    flag
}

fn run_summary(run: &RunRecord) -> serde_json::Value {
    let best = run.best_round();
    json!({
        "run_id": run.run_id,
        "dataset": run.dataset,
        "rounds": run.rounds.len(),
        "best_round": run.best_round_index,
        "stop_reason": run.stop_reason,
        "validation_accuracy": best.map(|r| r.validation_metrics.accuracy),
        "prompt": best.map(|r| r.prompt.clone()),
    })
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let mut cfg: TrainerConfig = read_json(&a.config)?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if let Some(v) = a.examples {
        cfg.examples_per_quadrant = v;
    }
    if let Some(v) = a.max_rounds {
        cfg.max_rounds = v;
    }
    if let Some(v) = a.concurrency {
        cfg.concurrency = v;
    }
    if a.run_id.is_some() {
        cfg.run_id = a.run_id.clone();
    }
    cfg.validate()?;
    let split = resolve_split(&ds, &a.split)?;
    let cache = open_cache(&a.cache)?;
    let overseer = Gateway::from_config(&cfg.overseer, cache.clone())?;
    let underling = Gateway::from_config(&cfg.underling, cache)?;
    let run_id = cfg.run_id.clone().unwrap_or_else(|| cfg.derived_run_id(&ds.name));

    let mut ledger = Ledger::open(&a.ledger)?;
    let existing = load_ledger(&a.ledger, &RunFilter::dataset(&ds.name))?;
    let trainer = Trainer::new(cfg.clone(), overseer, underling).with_interrupt(interrupt_flag());
    let run = match existing.run(&run_id) {
        Some(r) if r.is_complete() => {
            info!("run {run_id} already finished");
            r.clone()
        }
        Some(r) => {
            if r.split != split {
                warn!("run {run_id} continues on its persisted split, not the one requested");
            }
            info!("resuming run {run_id} after {} rounds", r.rounds.len());
            trainer.resume(&ds, r.clone(), &mut ledger)?
        }
        None => trainer.run(&ds, &split, &mut ledger)?,
    };
    let mut summary = run_summary(&run);
    if !run.is_complete() {
        print_json(&summary)?;
        bail!("interrupted; rerun the same command to resume run {run_id}");
    }
    if !a.no_test {
        let eval = match existing.tests.get(&run_id) {
            Some(t) => t.clone(),
            None => {
                let t = evaluate_on_test(&run, &ds, &trainer.underling, cfg.concurrency, &SystemClock)?;
                ledger.record_test(&t)?;
                t
            }
        };
        summary["test_accuracy"] = json!(eval.metrics.accuracy);
        summary["test_s"] = json!(eval.metrics.kt.s);
    }
    print_json(&summary)
}

/// Seeds members' test predictions from their recorded test evaluations.
fn attach_tests(sel: &mut EnsembleSelection, report: &LoadReport) {
    for (id, round) in sel.member_run_ids.iter().zip(sel.member_round_indices) {
        if let Some(t) = report.tests.get(id).filter(|t| t.round_index == round) {
            let labels: BTreeMap<_, _> = t.predictions.iter().map(|(k, p)| (k.clone(), p.label.clone())).collect();
            sel.member_test_predictions.insert(id.clone(), labels);
        }
    }
}

fn ensemble(a: EnsembleArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let report = load_ledger(&a.ledger, &RunFilter::dataset(&ds.name))?;
    let mut runs: Vec<RunRecord> = report
        .runs
        .iter()
        .filter(|r| r.is_complete() && r.best_round().is_some())
        .filter(|r| a.split_seed.is_none_or(|s| r.split.seed == s))
        .cloned()
        .collect();
    let Some(split) = runs.first().map(|r| r.split.clone()) else {
        bail!("no finished runs for `{}` in {}", ds.name, a.ledger.display());
    };
    if runs.iter().any(|r| r.split != split) {
        bail!("runs for `{}` use different splits; choose one with --split-seed", ds.name);
    }
    runs.sort_by(|x, y| x.created_at.cmp(&y.created_at).then_with(|| x.run_id.cmp(&y.run_id)));
    let gateway = match &a.config {
        Some(p) => {
            let cfg: TrainerConfig = read_json(p)?;
            Some(Gateway::from_config(&cfg.underling, open_cache(&a.cache)?)?)
        }
        None => None,
    };

    let mut ledger = Ledger::open(&a.ledger)?;
    let prefixes: Vec<usize> = if a.history { (3..=runs.len()).collect() } else { vec![runs.len()] };
    let mut previous: Option<[String; 3]> = None;
    let mut recorded = vec![];
    for k in prefixes {
        let pool = &runs[..k];
        let mut sel = select_best_triple(pool, &ds, &split, gateway.as_ref(), a.concurrency)?;
        if previous.as_ref() == Some(&sel.member_run_ids) {
            continue;
        }
        attach_tests(&mut sel, &report);
        let test = evaluate_ensemble(&mut sel, pool, &ds, &split, gateway.as_ref(), a.concurrency)?;
        ledger.record_ensemble(&sel)?;
        previous = Some(sel.member_run_ids.clone());
        recorded.push(json!({
            "members": sel.member_run_ids,
            "date": sel.date,
            "validation_accuracy": sel.validation_metrics.accuracy,
            "test_accuracy": test.accuracy,
            "test_s": test.kt.s,
            "triples_scored": sel.triples_scored,
        }));
    }
    print_json(&recorded)
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let split = resolve_split(&ds, &a.split)?;
    let kinds = match a.kind {
        BaselineChoice::Dummy => vec![BaselineKind::Dummy],
        BaselineChoice::Logreg => vec![BaselineKind::Logreg],
        BaselineChoice::Tree => vec![BaselineKind::Tree],
        BaselineChoice::All => vec![BaselineKind::Dummy, BaselineKind::Logreg, BaselineKind::Tree],
    };
    let mut ledger = a.ledger.as_ref().map(Ledger::open).transpose()?;
    let mut out = vec![];
    for kind in kinds {
        let r = run_baseline(&ds, &split, kind)?;
        if let Some(l) = ledger.as_mut() {
            l.record_baseline(&r)?;
        }
        out.push(json!({"model": r.model, "test_accuracy": r.test_metrics.accuracy, "test_s": r.test_metrics.kt.s, "notes": r.notes}));
    }
    print_json(&out)
}

fn read_pairs(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name).with_context(|| format!("{} has no `{name}` column", path.display()));
    let (ia, ib) = (col("a")?, col("b")?);
    let mut pairs = vec![];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j).unwrap_or("").trim().parse().with_context(|| format!("row {}: not a number", i + 1))
        };
        pairs.push((num(ia)?, num(ib)?));
    }
    Ok(pairs)
}

fn stats(cmd: StatsCommand) -> Result<()> {
    match cmd {
        StatsCommand::Trend { csv, baseline } => {
            let points = read_trend_csv(fs::File::open(&csv)?)?;
            let series: Vec<_> = points.iter().map(|p| (p.date, p.s)).collect();
            let trend = ols_trend(&series)?;
            let sota = match (baseline, points.last()) {
                (Some(b), Some(last)) => Some(predict_sota_date(&trend, last.date, last.s, b)),
                _ => None,
            };
            print_json(&json!({"trend": trend, "annual_improvement": trend.annual_improvement(), "sota": sota}))
        }
        StatsCommand::Wilcoxon { csv } => print_json(&wilcoxon_signed_rank(&read_pairs(&csv)?)?),
        StatsCommand::Herdan { text, input } => print_json(&herdan_text(&read_text(&text, &input)?)?),
        StatsCommand::ExampleCount { ledger, low, high, out } => {
            let report = load_ledger(&ledger, &RunFilter::default())?;
            let r = example_count_experiment(&report, low, high);
            fs::create_dir_all(&out)?;
            r.write_csv(fs::File::create(out.join("example_count.csv"))?)?;
            fs::write(out.join("example_count.svg"), r.plot().render())?;
            write_json(&out.join("example_count.json"), &r)?;
            print!("{}", r.summary());
            Ok(())
        }
    }
}

fn herdan(a: HerdanArgs) -> Result<()> {
    let report = load_ledger(&a.ledger, &RunFilter::default())?;
    let mut datasets: Vec<String> = report.ensembles.iter().map(|e| e.dataset.clone()).collect();
    datasets.sort();
    datasets.dedup();
    if let Some(d) = &a.dataset {
        datasets.retain(|x| x == d);
    }
    fs::create_dir_all(&a.out)?;
    let mut out = vec![];
    for ds in datasets {
        let points = herdan_points(&report, &ds);
        let path = a.out.join(format!("herdan_{ds}.csv"));
        write_herdan_csv(&points, fs::File::create(&path)?)?;
        let mut trends = serde_json::Map::new();
        for series in ["prompt", "reasoning"] {
            let xs: Vec<_> = points.iter().filter(|p| p.series == series).map(|p| (p.date, p.beta)).collect();
            trends.insert(series.into(), herdan_trend(&xs).map_or(serde_json::Value::Null, |t| json!(t)));
        }
        out.push(json!({"dataset": ds, "points": points.len(), "csv": path, "trend": trends}));
    }
    print_json(&out)
}
