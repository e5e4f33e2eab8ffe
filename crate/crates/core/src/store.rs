//! Append-only experiment ledger.
//!
//! A ledger is a directory:
//!
//! ```text
//! entries.jsonl   one LedgerEntry per line, ids strictly increasing
//! index.jsonl     one IndexRow per entry: id, kind, run id, byte offset
//! LOCK            pid of the current writer
//! ```
//!
//! A training round is written as one batch (the round entry followed by its
//! prediction entries) and fsynced before the trainer moves on, so a crash
//! loses at most the round in flight.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, SecondsFormat, Utc};
use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::baselines::BaselineResult;
use crate::data::RowId;
use crate::ensemble::EnsembleSelection;
use crate::trainer::{best_index, Clock, NarrativeRound, Prediction, PredictionFlag, RunRecord, RunSink, StopReason, SystemClock, TestEvaluation};

pub const SCHEMA_VERSION: u32 = 1;
pub const ENTRIES_FILE: &str = "entries.jsonl";
pub const INDEX_FILE: &str = "index.jsonl";
pub const LOCK_FILE: &str = "LOCK";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("ledger I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("ledger at {dir} is locked by pid {pid}")]
    Locked { dir: PathBuf, pid: u32 },
    #[error("unknown entry kind `{0}`")]
    UnknownKind(String),
    #[error("invalid {kind} payload: {reason}")]
    Invalid { kind: EntryKind, reason: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad trend row {line}: {reason}")]
    TrendRow { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Run,
    Round,
    Prediction,
    Ensemble,
    Baseline,
    Stat,
}

impl EntryKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EntryKind::Run => "run",
            EntryKind::Round => "round",
            EntryKind::Prediction => "prediction",
            EntryKind::Ensemble => "ensemble",
            EntryKind::Baseline => "baseline",
            EntryKind::Stat => "stat",
        }
    }
}

impl std::fmt::Display for EntryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntryKind {
    type Err = StoreError;
    fn from_str(s: &str) -> Result<Self, StoreError> {
        Ok(match s {
            "run" => EntryKind::Run,
            "round" => EntryKind::Round,
            "prediction" => EntryKind::Prediction,
            "ensemble" => EntryKind::Ensemble,
            "baseline" => EntryKind::Baseline,
            "stat" => EntryKind::Stat,
            other => return Err(StoreError::UnknownKind(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub schema_version: u32,
    pub id: u64,
    pub kind: EntryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub created_at: DateTime<Utc>,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub id: u64,
    pub kind: EntryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub offset: u64,
    pub len: u64,
}

/// Lifecycle events of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    /// The run header; `rounds` is empty.
    Begin { run: Box<RunRecord> },
    Finish { stop_reason: StopReason, best_round_index: Option<usize> },
    Test { evaluation: Box<TestEvaluation> },
}

/// A round without its predictions, which follow as separate entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPayload {
    pub round: NarrativeRound,
    pub prediction_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionPayload {
    pub round: usize,
    pub row_id: RowId,
    pub label: String,
    pub flag: PredictionFlag,
}

/// A new entry before it has an id.
#[derive(Debug, Clone)]
pub struct NewEntry {
    pub kind: EntryKind,
    pub run_id: Option<String>,
    pub payload: Value,
}

impl NewEntry {
    pub fn new(kind: EntryKind, run_id: Option<&str>, payload: impl Serialize) -> Result<NewEntry, StoreError> {
        Ok(NewEntry { kind, run_id: run_id.map(str::to_string), payload: serde_json::to_value(payload)? })
    }
}

fn invalid(kind: EntryKind, reason: impl std::fmt::Display) -> StoreError {
    StoreError::Invalid { kind, reason: reason.to_string() }
}

fn check_payload(kind: EntryKind, payload: &Value) -> Result<(), StoreError> {
    let e = |r: serde_json::Error| invalid(kind, r);
    match kind {
        EntryKind::Run => serde_json::from_value::<RunEvent>(payload.clone()).map(drop).map_err(e),
        EntryKind::Round => serde_json::from_value::<RoundPayload>(payload.clone()).map(drop).map_err(e),
        EntryKind::Prediction => serde_json::from_value::<PredictionPayload>(payload.clone()).map(drop).map_err(e),
        EntryKind::Ensemble => serde_json::from_value::<EnsembleSelection>(payload.clone()).map(drop).map_err(e),
        EntryKind::Baseline => serde_json::from_value::<BaselineResult>(payload.clone()).map(drop).map_err(e),
        EntryKind::Stat => match payload.get("name") {
            Some(Value::String(_)) => Ok(()),
            _ => Err(invalid(kind, "stat payload needs a string `name`")),
        },
    }
}

/// References seen so far, so new entries can be checked to resolve.
#[derive(Debug, Default)]
struct Refs {
    runs: BTreeSet<String>,
    rounds: BTreeSet<(String, usize)>,
}

impl Refs {
    fn check(&self, e: &NewEntry) -> Result<(), StoreError> {
        let need_run = |kind| match &e.run_id {
            None => Err(invalid(kind, "missing run id")),
            Some(r) => Ok(r.clone()),
        };
        match e.kind {
            EntryKind::Run => {
                let id = need_run(e.kind)?;
                let begin = e.payload.get("event").and_then(Value::as_str) == Some("begin");
                if begin && self.runs.contains(&id) {
                    return Err(invalid(e.kind, format!("run `{id}` already begun")));
                }
                if !begin && !self.runs.contains(&id) {
                    return Err(invalid(e.kind, format!("unknown run `{id}`")));
                }
            }
            EntryKind::Round => {
                let id = need_run(e.kind)?;
                if !self.runs.contains(&id) {
                    return Err(invalid(e.kind, format!("unknown run `{id}`")));
                }
            }
            EntryKind::Prediction => {
                let id = need_run(e.kind)?;
                let round = e.payload.get("round").and_then(Value::as_u64).unwrap_or(u64::MAX) as usize;
                if !self.rounds.contains(&(id.clone(), round)) {
                    return Err(invalid(e.kind, format!("unknown round {round} of run `{id}`")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn note(&mut self, kind: EntryKind, run_id: Option<&String>, payload: &Value) {
        let Some(id) = run_id else { return };
        match kind {
            EntryKind::Run => {
                self.runs.insert(id.clone());
            }
            EntryKind::Round => {
                if let Some(i) = payload.pointer("/round/index").and_then(Value::as_u64) {
                    self.rounds.insert((id.clone(), i as usize));
                }
            }
            _ => {}
        }
    }
}

struct WriterLock {
    path: PathBuf,
}

fn pid_alive(pid: u32) -> bool {
    Path::new(&format!("/proc/{pid}")).exists()
}

impl WriterLock {
    fn acquire(dir: &Path) -> Result<WriterLock, StoreError> {
        let path = dir.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id())?;
                    f.sync_all()?;
                    return Ok(WriterLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok());
                    match holder {
                        Some(pid) if pid_alive(pid) => return Err(StoreError::Locked { dir: dir.to_path_buf(), pid }),
                        _ => {
                            warn!("removing stale ledger lock {}", path.display());
                            fs::remove_file(&path)?;
                        }
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(StoreError::Locked { dir: dir.to_path_buf(), pid: 0 })
    }
}

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// The single writer of a ledger directory.
pub struct Ledger {
    dir: PathBuf,
    entries: File,
    index: File,
    offset: u64,
    next_id: u64,
    refs: Refs,
    clock: Arc<dyn Clock>,
    _lock: WriterLock,
}

impl std::fmt::Debug for Ledger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ledger").field("dir", &self.dir).field("next_id", &self.next_id).finish()
    }
}

/// Drops a torn final line left by a crash mid-write.
fn truncate_torn_tail(path: &Path) -> Result<u64, StoreError> {
    let mut f = OpenOptions::new().read(true).write(true).open(path)?;
    let mut bytes = vec![];
    f.read_to_end(&mut bytes)?;
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
    if keep < bytes.len() {
        warn!("{}: dropping {} bytes of a torn final entry", path.display(), bytes.len() - keep);
        f.set_len(keep as u64)?;
        f.sync_all()?;
    }
    Ok(keep as u64)
}

impl Ledger {
    pub fn open(dir: impl AsRef<Path>) -> Result<Ledger, StoreError> {
        Ledger::open_with_clock(dir, Arc::new(SystemClock))
    }

    pub fn open_with_clock(dir: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Ledger, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let lock = WriterLock::acquire(&dir)?;
        let entries_path = dir.join(ENTRIES_FILE);
        if !entries_path.exists() {
            File::create(&entries_path)?;
        }
        let offset = truncate_torn_tail(&entries_path)?;
        let scan = scan_entries(&entries_path)?;
        let mut refs = Refs::default();
        for (_, e) in &scan.entries {
            refs.note(e.kind, e.run_id.as_ref(), &e.payload);
        }
        let next_id = scan.entries.last().map_or(1, |(_, e)| e.id + 1);

        // The index is derived data; rebuild it whenever it disagrees.
        let index_path = dir.join(INDEX_FILE);
        let rows: Vec<IndexRow> = scan
            .entries
            .iter()
            .map(|(span, e)| IndexRow { id: e.id, kind: e.kind, run_id: e.run_id.clone(), offset: span.0, len: span.1 })
            .collect();
        let current = read_index(&dir).unwrap_or_default();
        if current != rows {
            let mut text = String::new();
            for r in &rows {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            let tmp = dir.join(".index.jsonl.tmp");
            fs::write(&tmp, text)?;
            File::open(&tmp)?.sync_all()?;
            fs::rename(&tmp, &index_path)?;
        }
        let entries = OpenOptions::new().append(true).open(&entries_path)?;
        let index = OpenOptions::new().append(true).create(true).open(&index_path)?;
        Ok(Ledger { dir, entries, index, offset, next_id, refs, clock, _lock: lock })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn record(&mut self, entry: NewEntry) -> Result<u64, StoreError> {
        Ok(self.record_batch(vec![entry])?[0])
    }

    /// Validates by kind name, for entries arriving as text.
    pub fn record_raw(&mut self, kind: &str, run_id: Option<&str>, payload: Value) -> Result<u64, StoreError> {
        let kind = EntryKind::from_str(kind)?;
        self.record(NewEntry { kind, run_id: run_id.map(str::to_string), payload })
    }

    /// Writes all entries with one fsync; either every entry validates or
    /// nothing is written.
    pub fn record_batch(&mut self, batch: Vec<NewEntry>) -> Result<Vec<u64>, StoreError> {
        let mut staged = Refs { runs: self.refs.runs.clone(), rounds: self.refs.rounds.clone() };
        for e in &batch {
            check_payload(e.kind, &e.payload)?;
            staged.check(e)?;
            staged.note(e.kind, e.run_id.as_ref(), &e.payload);
        }
        let now = self.clock.now();
        let mut text = String::new();
        let mut index = String::new();
        let mut ids = Vec::with_capacity(batch.len());
        let mut offset = self.offset;
        for (i, e) in batch.into_iter().enumerate() {
            let id = self.next_id + i as u64;
            let entry = LedgerEntry { schema_version: SCHEMA_VERSION, id, kind: e.kind, run_id: e.run_id, created_at: now, payload: e.payload };
            let line = serde_json::to_string(&entry)? + "\n";
            let row = IndexRow { id, kind: entry.kind, run_id: entry.run_id, offset, len: line.len() as u64 };
            offset += line.len() as u64;
            text.push_str(&line);
            index.push_str(&serde_json::to_string(&row)?);
            index.push('\n');
            ids.push(id);
        }
        self.entries.write_all(text.as_bytes())?;
        self.entries.sync_data()?;
        self.index.write_all(index.as_bytes())?;
        self.index.sync_data()?;
        self.offset = offset;
        self.next_id += ids.len() as u64;
        self.refs = staged;
        Ok(ids)
    }

    pub fn record_test(&mut self, eval: &TestEvaluation) -> Result<u64, StoreError> {
        let ev = RunEvent::Test { evaluation: Box::new(eval.clone()) };
        self.record(NewEntry::new(EntryKind::Run, Some(&eval.run_id), ev)?)
    }

    pub fn record_ensemble(&mut self, sel: &EnsembleSelection) -> Result<u64, StoreError> {
        self.record(NewEntry::new(EntryKind::Ensemble, None, sel)?)
    }

    pub fn record_baseline(&mut self, b: &BaselineResult) -> Result<u64, StoreError> {
        self.record(NewEntry::new(EntryKind::Baseline, None, b)?)
    }

    pub fn record_stat(&mut self, name: &str, mut body: serde_json::Map<String, Value>) -> Result<u64, StoreError> {
        body.insert("name".into(), Value::String(name.to_string()));
        self.record(NewEntry::new(EntryKind::Stat, None, Value::Object(body))?)
    }
}

fn round_batch(run_id: &str, round: &NarrativeRound) -> Result<Vec<NewEntry>, StoreError> {
    let mut header = round.clone();
    let predictions = std::mem::take(&mut header.predictions);
    let mut batch = vec![NewEntry::new(
        EntryKind::Round,
        Some(run_id),
        RoundPayload { round: header, prediction_count: predictions.len() },
    )?];
    for (row_id, p) in predictions {
        batch.push(NewEntry::new(
            EntryKind::Prediction,
            Some(run_id),
            PredictionPayload { round: round.index, row_id, label: p.label, flag: p.flag },
        )?);
    }
    Ok(batch)
}

impl RunSink for Ledger {
    fn begin(&mut self, run: &RunRecord) -> Result<(), String> {
        let mut header = run.clone();
        header.rounds.clear();
        let ev = RunEvent::Begin { run: Box::new(header) };
        NewEntry::new(EntryKind::Run, Some(&run.run_id), ev).and_then(|e| self.record(e)).map(drop).map_err(|e| e.to_string())
    }

    fn round(&mut self, run_id: &str, round: &NarrativeRound) -> Result<(), String> {
        round_batch(run_id, round).and_then(|b| self.record_batch(b)).map(drop).map_err(|e| e.to_string())
    }

    fn finish(&mut self, run: &RunRecord) -> Result<(), String> {
        let Some(stop_reason) = run.stop_reason else {
            return Err("finish called on an unfinished run".into());
        };
        let ev = RunEvent::Finish { stop_reason, best_round_index: run.best_round_index };
        NewEntry::new(EntryKind::Run, Some(&run.run_id), ev).and_then(|e| self.record(e)).map(drop).map_err(|e| e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
struct Scan {
    /// (byte offset, byte length) of each parsed line.
    entries: Vec<((u64, u64), LedgerEntry)>,
    problems: Vec<String>,
}

fn scan_entries(path: &Path) -> Result<Scan, StoreError> {
    let mut scan = Scan::default();
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(scan),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(f);
    let mut offset = 0u64;
    let mut line_no = 0;
    let mut last_id = 0;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let span = (offset, n as u64);
        offset += n as u64;
        if !line.ends_with('\n') {
            scan.problems.push(format!("line {line_no}: torn final entry skipped"));
            break;
        }
        match serde_json::from_str::<LedgerEntry>(&line) {
            Ok(e) if e.schema_version > SCHEMA_VERSION => {
                scan.problems.push(format!("line {line_no}: schema version {} is newer than {SCHEMA_VERSION}; skipped", e.schema_version))
            }
            Ok(e) if e.id <= last_id => scan.problems.push(format!("line {line_no}: id {} is not increasing; skipped", e.id)),
            Ok(e) => {
                last_id = e.id;
                scan.entries.push((span, e));
            }
            Err(err) => scan.problems.push(format!("line {line_no}: corrupt entry skipped ({err})")),
        }
    }
    Ok(scan)
}

/// Every readable entry plus a description of each one skipped.
pub fn read_entries(dir: &Path) -> Result<(Vec<LedgerEntry>, Vec<String>), StoreError> {
    let scan = scan_entries(&dir.join(ENTRIES_FILE))?;
    Ok((scan.entries.into_iter().map(|(_, e)| e).collect(), scan.problems))
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexRow>, StoreError> {
    let text = match fs::read_to_string(dir.join(INDEX_FILE)) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
        Err(e) => return Err(e.into()),
    };
    text.lines().filter(|l| !l.is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Reads one entry by id through the index.
pub fn read_entry(dir: &Path, id: u64) -> Result<Option<LedgerEntry>, StoreError> {
    let Some(row) = read_index(dir)?.into_iter().find(|r| r.id == id) else {
        return Ok(None);
    };
    let mut f = File::open(dir.join(ENTRIES_FILE))?;
    f.seek(SeekFrom::Start(row.offset))?;
    let mut buf = vec![0; row.len as usize];
    f.read_exact(&mut buf)?;
    Ok(Some(serde_json::from_slice(&buf)?))
}

#[derive(Debug, Clone, Default)]
pub struct RunFilter {
    pub dataset: Option<String>,
    pub model: Option<String>,
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
}

impl RunFilter {
    pub fn dataset(name: &str) -> RunFilter {
        RunFilter { dataset: Some(name.to_string()), ..RunFilter::default() }
    }

    fn date_ok(&self, date: DateTime<Utc>) -> bool {
        self.from.is_none_or(|f| date >= f) && self.to.is_none_or(|t| date <= t)
    }

    pub fn matches(&self, run: &RunRecord) -> bool {
        self.dataset.as_ref().is_none_or(|d| &run.dataset == d)
            && self.model.as_ref().is_none_or(|m| run.overseer_model() == m)
            && self.date_ok(run.created_at)
    }

    fn matches_model_set(&self, dataset: &str, models: &[String], date: DateTime<Utc>) -> bool {
        self.dataset.as_ref().is_none_or(|d| dataset == d)
            && self.model.as_ref().is_none_or(|m| models.iter().any(|x| x == m))
            && self.date_ok(date)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub runs: Vec<RunRecord>,
    /// Test-split scores by run id.
    pub tests: BTreeMap<String, TestEvaluation>,
    pub ensembles: Vec<EnsembleSelection>,
    pub baselines: Vec<BaselineResult>,
    pub stats: Vec<Value>,
    pub problems: Vec<String>,
}

impl LoadReport {
    pub fn run(&self, id: &str) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.run_id == id)
    }
}

struct PendingRound {
    round: NarrativeRound,
    expected: usize,
}

/// Rebuilds runs from their entries. Rounds whose predictions are
/// incomplete are dropped with a problem note, never silently.
pub fn load(dir: &Path, filter: &RunFilter) -> Result<LoadReport, StoreError> {
    let (entries, mut problems) = read_entries(dir)?;
    let mut order: Vec<String> = vec![];
    let mut runs: BTreeMap<String, RunRecord> = BTreeMap::new();
    let mut pending: BTreeMap<String, PendingRound> = BTreeMap::new();
    let mut report = LoadReport::default();

    fn settle(pending: &mut BTreeMap<String, PendingRound>, runs: &mut BTreeMap<String, RunRecord>, run_id: &str, problems: &mut Vec<String>) {
        if let Some(p) = pending.remove(run_id) {
            if p.round.predictions.len() == p.expected {
                if let Some(run) = runs.get_mut(run_id) {
                    if p.round.index == run.rounds.len() {
                        run.rounds.push(p.round);
                    } else {
                        problems.push(format!("run {run_id}: round {} out of sequence; skipped", p.round.index));
                    }
                }
            } else {
                problems.push(format!(
                    "run {run_id}: round {} has {} of {} predictions; skipped",
                    p.round.index,
                    p.round.predictions.len(),
                    p.expected
                ));
            }
        }
    }

    for e in entries {
        let id = e.id;
        match e.kind {
            EntryKind::Run | EntryKind::Round | EntryKind::Prediction => {
                let Some(run_id) = e.run_id.clone() else {
                    problems.push(format!("entry {id}: {} without run id; skipped", e.kind));
                    continue;
                };
                match e.kind {
                    EntryKind::Run => match serde_json::from_value::<RunEvent>(e.payload) {
                        Ok(RunEvent::Begin { run }) => {
                            if let std::collections::btree_map::Entry::Vacant(slot) = runs.entry(run_id.clone()) {
                                order.push(run_id);
                                slot.insert(*run);
                            } else {
                                problems.push(format!("entry {id}: run {run_id} begun twice; skipped"));
                            }
                        }
                        Ok(RunEvent::Finish { stop_reason, best_round_index }) => {
                            settle(&mut pending, &mut runs, &run_id, &mut problems);
                            match runs.get_mut(&run_id) {
                                Some(run) => {
                                    run.stop_reason = Some(stop_reason);
                                    run.best_round_index = best_round_index;
                                }
                                None => problems.push(format!("entry {id}: finish for unknown run {run_id}")),
                            }
                        }
                        Ok(RunEvent::Test { evaluation }) => {
                            report.tests.insert(run_id, *evaluation);
                        }
                        Err(err) => problems.push(format!("entry {id}: bad run payload ({err})")),
                    },
                    EntryKind::Round => {
                        settle(&mut pending, &mut runs, &run_id, &mut problems);
                        match serde_json::from_value::<RoundPayload>(e.payload) {
                            Ok(p) if runs.contains_key(&run_id) => {
                                let mut round = p.round;
                                round.predictions.clear();
                                let expected = p.prediction_count;
                                pending.insert(run_id.clone(), PendingRound { round, expected });
                                settle_if_full(&mut pending, &mut runs, &run_id, &mut problems);
                            }
                            Ok(_) => problems.push(format!("entry {id}: round for unknown run {run_id}")),
                            Err(err) => problems.push(format!("entry {id}: bad round payload ({err})")),
                        }
                    }
                    _ => match serde_json::from_value::<PredictionPayload>(e.payload) {
                        Ok(p) => match pending.get_mut(&run_id) {
                            Some(pr) if pr.round.index == p.round => {
                                pr.round.predictions.insert(p.row_id, Prediction { label: p.label, flag: p.flag });
                                settle_if_full(&mut pending, &mut runs, &run_id, &mut problems);
                            }
                            _ => problems.push(format!("entry {id}: prediction for a round not being read; skipped")),
                        },
                        Err(err) => problems.push(format!("entry {id}: bad prediction payload ({err})")),
                    },
                }
            }
            EntryKind::Ensemble => match serde_json::from_value::<EnsembleSelection>(e.payload) {
                Ok(s) => report.ensembles.push(s),
                Err(err) => problems.push(format!("entry {id}: bad ensemble payload ({err})")),
            },
            EntryKind::Baseline => match serde_json::from_value::<BaselineResult>(e.payload) {
                Ok(b) => report.baselines.push(b),
                Err(err) => problems.push(format!("entry {id}: bad baseline payload ({err})")),
            },
            EntryKind::Stat => report.stats.push(e.payload),
        }
    }

    fn settle_if_full(pending: &mut BTreeMap<String, PendingRound>, runs: &mut BTreeMap<String, RunRecord>, run_id: &str, problems: &mut Vec<String>) {
        if pending.get(run_id).is_some_and(|p| p.round.predictions.len() == p.expected) {
            settle(pending, runs, run_id, problems);
        }
    }

    let ids: Vec<String> = pending.keys().cloned().collect();
    for run_id in ids {
        settle(&mut pending, &mut runs, &run_id, &mut problems);
    }
    for run_id in order {
        let mut run = runs.remove(&run_id).unwrap();
        if run.stop_reason.is_none() {
            run.best_round_index = best_index(&run.validation_history());
        }
        if filter.matches(&run) {
            report.runs.push(run);
        }
    }
    let kept: BTreeSet<&str> = report.runs.iter().map(|r| r.run_id.as_str()).collect();
    report.tests.retain(|k, _| kept.contains(k.as_str()));
    report.ensembles.retain(|s| filter.matches_model_set(&s.dataset, &s.member_models, s.date));
    report.baselines.retain(|b| filter.dataset.as_ref().is_none_or(|d| &b.dataset == d));
    report.problems = problems;
    Ok(report)
}

pub fn load_runs(dir: &Path, filter: &RunFilter) -> Result<(Vec<RunRecord>, Vec<String>), StoreError> {
    let r = load(dir, filter)?;
    Ok((r.runs, r.problems))
}

// ---------------------------------------------------------------------------
// CSV export
// ---------------------------------------------------------------------------

pub fn iso(date: DateTime<Utc>) -> String {
    date.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub date: DateTime<Utc>,
    pub model: String,
    #[serde(rename = "S")]
    pub s: f64,
    pub accuracy: f64,
}

/// Ensembles with test scores, in date order, keeping each one that beats
/// every earlier ensemble on validation accuracy (selection never looks at
/// test scores).
pub fn improving_ensembles<'a>(ensembles: &'a [EnsembleSelection], dataset: &str) -> Vec<&'a EnsembleSelection> {
    let mut xs: Vec<&EnsembleSelection> = ensembles.iter().filter(|e| e.dataset == dataset && e.test_metrics.is_some()).collect();
    xs.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.member_run_ids.cmp(&b.member_run_ids)));
    let mut best = f64::NEG_INFINITY;
    xs.retain(|e| {
        let keep = e.validation_metrics.accuracy > best;
        if keep {
            best = e.validation_metrics.accuracy;
        }
        keep
    });
    xs
}

pub fn ensemble_trend(ensembles: &[EnsembleSelection], dataset: &str) -> Vec<TrendPoint> {
    improving_ensembles(ensembles, dataset)
        .into_iter()
        .map(|e| {
            let t = e.test_metrics.as_ref().unwrap();
            TrendPoint { date: e.date, model: e.model_label(), s: t.kt.s, accuracy: t.accuracy }
        })
        .collect()
}

pub fn write_trend_csv<W: Write>(points: &[TrendPoint], w: W) -> Result<(), StoreError> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["date", "model", "S", "accuracy"])?;
    for p in points {
        c.write_record([iso(p.date), p.model.clone(), p.s.to_string(), p.accuracy.to_string()])?;
    }
    c.flush()?;
    Ok(())
}

pub fn read_trend_csv<R: Read>(r: R) -> Result<Vec<TrendPoint>, StoreError> {
    let mut c = csv::Reader::from_reader(r);
    let headers = c.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(d), Some(m), Some(s), Some(a)) = (col("date"), col("model"), col("S"), col("accuracy")) else {
        return Err(StoreError::TrendRow { line: 1, reason: "header must contain date,model,S,accuracy".into() });
    };
    let mut out = vec![];
    for (i, rec) in c.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |reason: String| StoreError::TrendRow { line, reason };
        let date = DateTime::parse_from_rfc3339(&rec[d]).map_err(|e| bad(format!("date: {e}")))?.with_timezone(&Utc);
        let s = rec[s].parse().map_err(|e| bad(format!("S: {e}")))?;
        let accuracy = rec[a].parse().map_err(|e| bad(format!("accuracy: {e}")))?;
        out.push(TrendPoint { date, model: rec[m].to_string(), s, accuracy });
    }
    Ok(out)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn stop_name(s: Option<StopReason>) -> String {
    match s {
        None => String::new(),
        Some(StopReason::Patience) => "patience".into(),
        Some(StopReason::MaxRounds) => "max_rounds".into(),
        Some(StopReason::PerfectValidation) => "perfect_validation".into(),
    }
}

fn flag_name(f: PredictionFlag) -> &'static str {
    match f {
        PredictionFlag::Ok => "ok",
        PredictionFlag::Unparseable => "unparseable",
        PredictionFlag::Failed => "failed",
        PredictionFlag::LocalRandom => "local_random",
    }
}

/// File name for a dataset's trend series inside an export bundle.
pub fn trend_file_name(dataset: &str) -> String {
    let safe: String = dataset.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("trend_{safe}.csv")
}

/// Writes runs, rounds, predictions, ensembles, baselines and one trend
/// series per dataset under `out`; returns the files written.
pub fn export_csv(report: &LoadReport, out: &Path) -> Result<Vec<PathBuf>, StoreError> {
    fs::create_dir_all(out)?;
    let mut written = vec![];
    let mut open = |name: &str| -> Result<csv::Writer<File>, StoreError> {
        let path = out.join(name);
        written.push(path.clone());
        Ok(csv::Writer::from_path(path)?)
    };

    let mut w = open("runs.csv")?;
    w.write_record([
        "run_id", "dataset", "overseer_model", "underling_model", "examples_per_quadrant", "seed", "rounds", "best_round",
        "stop_reason", "created_at", "best_validation_accuracy", "test_accuracy", "test_S",
    ])?;
    for r in &report.runs {
        let test = report.tests.get(&r.run_id);
        w.write_record([
            r.run_id.clone(),
            r.dataset.clone(),
            r.config.overseer.model.clone(),
            r.config.underling.model.clone(),
            r.config.examples_per_quadrant.to_string(),
            r.config.seed.to_string(),
            r.rounds.len().to_string(),
            opt(r.best_round_index),
            stop_name(r.stop_reason),
            iso(r.created_at),
            opt(r.best_round().map(|b| b.validation_metrics.accuracy)),
            opt(test.map(|t| t.metrics.accuracy)),
            opt(test.map(|t| t.metrics.kt.s)),
        ])?;
    }
    w.flush()?;

    let mut w = open("rounds.csv")?;
    w.write_record([
        "run_id", "round", "started_at", "finished_at", "train_accuracy", "validation_accuracy", "train_S", "validation_S", "prompt", "narration",
    ])?;
    for r in &report.runs {
        for round in &r.rounds {
            w.write_record([
                r.run_id.clone(),
                round.index.to_string(),
                iso(round.started_at),
                iso(round.finished_at),
                round.train_metrics.accuracy.to_string(),
                round.validation_metrics.accuracy.to_string(),
                round.train_metrics.kt.s.to_string(),
                round.validation_metrics.kt.s.to_string(),
                round.prompt.clone(),
                round.narration.clone(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = open("predictions.csv")?;
    w.write_record(["run_id", "round", "row_id", "label", "flag"])?;
    for r in &report.runs {
        for round in &r.rounds {
            for (id, p) in &round.predictions {
                w.write_record([r.run_id.as_str(), &round.index.to_string(), id.as_str(), &p.label, flag_name(p.flag)])?;
            }
        }
        if let Some(t) = report.tests.get(&r.run_id) {
            for (id, p) in &t.predictions {
                w.write_record([r.run_id.as_str(), &format!("test:{}", t.round_index), id.as_str(), &p.label, flag_name(p.flag)])?;
            }
        }
    }
    w.flush()?;

    let mut w = open("ensembles.csv")?;
    w.write_record(["dataset", "date", "models", "members", "validation_accuracy", "test_accuracy", "test_S"])?;
    for e in &report.ensembles {
        w.write_record([
            e.dataset.clone(),
            iso(e.date),
            e.model_label(),
            e.member_run_ids.join(";"),
            e.validation_metrics.accuracy.to_string(),
            opt(e.test_metrics.as_ref().map(|t| t.accuracy)),
            opt(e.test_metrics.as_ref().map(|t| t.kt.s)),
        ])?;
    }
    w.flush()?;

    let mut w = open("baselines.csv")?;
    w.write_record(["dataset", "model", "train_accuracy", "validation_accuracy", "test_accuracy", "test_S"])?;
    for b in &report.baselines {
        w.write_record([
            b.dataset.clone(),
            b.model.name().to_string(),
            b.train_metrics.accuracy.to_string(),
            b.validation_metrics.accuracy.to_string(),
            b.test_metrics.accuracy.to_string(),
            b.test_metrics.kt.s.to_string(),
        ])?;
    }
    w.flush()?;

    let datasets: BTreeSet<&str> = report.ensembles.iter().map(|e| e.dataset.as_str()).collect();
    for d in datasets {
        let path = out.join(trend_file_name(d));
        write_trend_csv(&ensemble_trend(&report.ensembles, d), File::create(&path)?)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn clock() -> Arc<dyn Clock> {
        Arc::new(crate::trainer::FixedClock(Utc.with_ymd_and_hms(2025, 1, 2, 3, 4, 5).unwrap()))
    }

    #[test]
    fn stat_roundtrip_and_kind_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = Ledger::open_with_clock(dir.path(), clock()).unwrap();
        let payload = serde_json::json!({"name": "wilcoxon", "p": 0.25, "note": "a,b\nc"});
        let id = l.record_raw("stat", None, payload.clone()).unwrap();
        assert!(matches!(l.record_raw("bogus", None, payload.clone()), Err(StoreError::UnknownKind(_))));
        assert!(matches!(l.record_raw("stat", None, serde_json::json!({"p": 1})), Err(StoreError::Invalid { .. })));
        assert!(matches!(l.record_raw("round", Some("nope"), serde_json::json!({})), Err(StoreError::Invalid { .. })));
        let e = read_entry(dir.path(), id).unwrap().unwrap();
        assert_eq!(e.payload, payload);
        assert_eq!(e.id, 1);
        assert_eq!(l.next_id(), 2);
    }

    #[test]
    fn lock_excludes_second_writer() {
        let dir = tempfile::tempdir().unwrap();
        let l = Ledger::open(dir.path()).unwrap();
        assert!(matches!(Ledger::open(dir.path()), Err(StoreError::Locked { .. })));
        drop(l);
        Ledger::open(dir.path()).unwrap();
    }

    #[test]
    fn stale_lock_is_replaced() {
        let dir = tempfile::tempdir().unwrap();
        // pid_max is far below this, so no such process exists.
        fs::write(dir.path().join(LOCK_FILE), "4000000000\n").unwrap();
        Ledger::open(dir.path()).unwrap();
    }

    #[test]
    fn torn_tail_and_corrupt_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut l = Ledger::open_with_clock(dir.path(), clock()).unwrap();
            l.record_stat("a", Default::default()).unwrap();
        }
        let path = dir.path().join(ENTRIES_FILE);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{not json}\n{\"schema_version\":1,\"id\":9");
        fs::write(&path, text).unwrap();
        let (entries, problems) = read_entries(dir.path()).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(problems.len(), 2);
        let mut l = Ledger::open_with_clock(dir.path(), clock()).unwrap();
        assert_eq!(l.record_stat("b", Default::default()).unwrap(), 2);
        assert_eq!(read_index(dir.path()).unwrap().len(), 2);
    }

    #[test]
    fn ten_thousand_predictions_byte_identical() {
        use crate::data::fixtures::labelled;
        use crate::data::{split_dataset, SplitRatios};
        use crate::gateway::ProviderConfig;
        use crate::metrics::evaluate;
        use crate::trainer::{QuadrantSamples, TrainerConfig};

        let ds = labelled(5, 5);
        let split = split_dataset(&ds, SplitRatios::default(), 1).unwrap();
        let cfg = TrainerConfig::new(ProviderConfig::scripted("o.json"), ProviderConfig::scripted("u.json"));
        let run = RunRecord {
            run_id: "r".into(),
            dataset: ds.name.clone(),
            config: cfg,
            split,
            rounds: vec![],
            best_round_index: None,
            stop_reason: None,
            created_at: clock().now(),
        };
        let predictions: BTreeMap<RowId, Prediction> = (0..10_000)
            .map(|i| (RowId::from(i), Prediction { label: if i % 3 == 0 { "1" } else { "0" }.into(), flag: PredictionFlag::Ok }))
            .collect();
        let labels: BTreeMap<RowId, String> = predictions.iter().map(|(k, p)| (k.clone(), p.label.clone())).collect();
        let m = evaluate(&labels, &labels, "1").unwrap();
        let round = NarrativeRound {
            index: 0,
            prompt: "choose randomly".into(),
            narration: String::new(),
            overseer_message: None,
            train_metrics: m,
            validation_metrics: m,
            predictions,
            quadrant_samples: QuadrantSamples::default(),
            started_at: clock().now(),
            finished_at: clock().now(),
        };
        let dir = tempfile::tempdir().unwrap();
        {
            let mut l = Ledger::open_with_clock(dir.path(), clock()).unwrap();
            l.begin(&run).unwrap();
            l.round("r", &round).unwrap();
        }
        let text = fs::read_to_string(dir.path().join(ENTRIES_FILE)).unwrap();
        let (entries, problems) = read_entries(dir.path()).unwrap();
        assert!(problems.is_empty());
        assert_eq!(entries.len(), 10_002);
        let again: String = entries.iter().map(|e| serde_json::to_string(e).unwrap() + "\n").collect();
        assert_eq!(again, text);
        let (runs, _) = load_runs(dir.path(), &RunFilter::default()).unwrap();
        let mut expect = run.clone();
        expect.rounds.push(round);
        expect.best_round_index = Some(0);
        assert_eq!(runs, vec![expect]);
        assert!(load_runs(dir.path(), &RunFilter::dataset("other")).unwrap().0.is_empty());
    }

    #[test]
    fn empty_store_loads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let r = load(dir.path(), &RunFilter::default()).unwrap();
        assert!(r.runs.is_empty() && r.problems.is_empty());
    }

    fn trend_point() -> impl Strategy<Value = TrendPoint> {
        (0i64..4_000_000_000, 0u32..1_000_000_000, "\\PC{0,12}", -5.0f64..5.0, 0.0f64..1.0)
            .prop_map(|(secs, nanos, model, s, accuracy)| TrendPoint { date: Utc.timestamp_opt(secs, nanos).unwrap(), model, s, accuracy })
    }

    proptest! {
        #[test]
        fn trend_csv_roundtrip(points in proptest::collection::vec(trend_point(), 0..20)) {
            let mut buf = vec![];
            write_trend_csv(&points, &mut buf).unwrap();
            prop_assert_eq!(read_trend_csv(&buf[..]).unwrap(), points);
        }

        #[test]
        fn narrative_text_quoting_is_lossless(fields in proptest::collection::vec("[a-z,\"\n\r ]{0,20}|\\PC{0,10}", 1..6)) {
            let mut buf = vec![];
            {
                let mut w = csv::Writer::from_writer(&mut buf);
                w.write_record(&fields).unwrap();
                w.flush().unwrap();
            }
            let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(&buf[..]);
            let rec = r.records().next().unwrap().unwrap();
            let back: Vec<String> = rec.iter().map(str::to_string).collect();
            prop_assert_eq!(back, fields);
        }
    }
}
