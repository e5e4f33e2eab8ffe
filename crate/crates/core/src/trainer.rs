//! The training loop: evaluate the current narrative with the underling,
//! show the overseer how it did, take its refined narrative, and stop once
//! validation accuracy stops improving.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{render_row, Dataset, Row, RowId, Split, SplitAssignment};
use crate::gateway::{parse_overseer_reply, parse_underling_reply, ChatRequest, Gateway, GatewayError, ProviderConfig, ResponseHint};
use crate::metrics::{evaluate, MetricsError, MetricsReport};

pub const ROUND_ZERO_PROMPT: &str = "choose randomly";

/// Shown to the overseer at the top of every round.
pub const OVERSEER_PROMPT: &str = "You are part of a program that is trying to learn inference rules on this dataset. At each round, a prompt is shown to an LLM together with one row of data at a time. It then attempts to predict the outcome based on the rules in the prompt. This process works well if the prompt has very explicit and clear rules: aim for unambiguous thresholds for values, clear criteria for labels and careful wording.

We would like to improve the prompt that is being used.

Please create a new prompt that will reduce the number of false positives and false negatives in this dataset. You can see the prompt(s) that have been used previously, and how effective they were. There are also some examples of where those prompt(s) did and didn't work.

Remember: you need to create rules. Don't just waffle about what changes need to happen. Look at the examples where the previous prediction system got it wrong, and try to come up with at least one new rule that would handle one of those situations correctly.";

const OVERSEER_SYSTEM: &str = "You write classification rules for tabular data. Reply with a single JSON object.";

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("underling failed on {failed} of {total} rows (last error: {last})")]
    Underling { failed: usize, total: usize, last: String },
    #[error("underling aborted: {0}")]
    Fatal(GatewayError),
    #[error("overseer: {0}")]
    Overseer(GatewayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("ledger: {0}")]
    Sink(String),
    #[error("cannot resume: {0}")]
    Resume(String),
}

fn default_patience() -> usize {
    3
}
fn default_examples() -> usize {
    3
}
fn default_max_rounds() -> usize {
    100
}
fn default_concurrency() -> usize {
    8
}
fn default_parse_retries() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_examples")]
    pub examples_per_quadrant: usize,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Score round 0 with local coin flips instead of querying the underling.
    #[serde(default)]
    pub local_random_first_round: bool,
    /// Extra overseer attempts when its reply has no usable prompt.
    #[serde(default = "default_parse_retries")]
    pub overseer_parse_retries: usize,
    #[serde(default)]
    pub run_id: Option<String>,
    pub overseer: ProviderConfig,
    pub underling: ProviderConfig,
}

impl TrainerConfig {
    pub fn new(overseer: ProviderConfig, underling: ProviderConfig) -> Self {
        TrainerConfig {
            patience: default_patience(),
            examples_per_quadrant: default_examples(),
            max_rounds: default_max_rounds(),
            seed: 0,
            concurrency: default_concurrency(),
            local_random_first_round: false,
            overseer_parse_retries: default_parse_retries(),
            run_id: None,
            overseer,
            underling,
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        if self.patience == 0 {
            return Err(TrainerError::Config("patience must be at least 1".into()));
        }
        if self.examples_per_quadrant == 0 {
            return Err(TrainerError::Config("examples_per_quadrant must be at least 1".into()));
        }
        if self.max_rounds == 0 {
            return Err(TrainerError::Config("max_rounds must be at least 1".into()));
        }
        if self.concurrency == 0 {
            return Err(TrainerError::Config("concurrency must be at least 1".into()));
        }
        Ok(())
    }

    /// Stable id derived from everything that shapes the run.
    pub fn derived_run_id(&self, dataset: &str) -> String {
        let material = serde_json::to_vec(&(
            dataset,
            &self.overseer.model,
            &self.underling.model,
            self.examples_per_quadrant,
            self.patience,
            self.seed,
        ))
        .unwrap();
        let digest = hex::encode(Sha256::digest(&material));
        format!("{dataset}-{}", &digest[..12])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionFlag {
    Ok,
    /// The reply named neither label; scored as the wrong label.
    Unparseable,
    /// The call failed after retries; scored as the wrong label.
    Failed,
    /// Round-0 local coin flip.
    LocalRandom,
}

/// `label` is the label the row was scored with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub flag: PredictionFlag,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadrantSamples {
    pub tp: Vec<RowId>,
    pub fp: Vec<RowId>,
    pub tn: Vec<RowId>,
    #[serde(rename = "fn")]
    pub fn_: Vec<RowId>,
}

impl QuadrantSamples {
    pub fn all(&self) -> impl Iterator<Item = &RowId> {
        self.tp.iter().chain(&self.fp).chain(&self.tn).chain(&self.fn_)
    }

    pub fn len(&self) -> usize {
        self.tp.len() + self.fp.len() + self.tn.len() + self.fn_.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrativeRound {
    pub index: usize,
    pub prompt: String,
    pub narration: String,
    /// The overseer message this prompt answered; absent for round 0.
    pub overseer_message: Option<String>,
    pub train_metrics: MetricsReport,
    pub validation_metrics: MetricsReport,
    /// Train and validation rows.
    pub predictions: BTreeMap<RowId, Prediction>,
    /// Training rows shown to the overseer after this round.
    pub quadrant_samples: QuadrantSamples,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl NarrativeRound {
    pub fn labels(&self) -> BTreeMap<RowId, String> {
        self.predictions.iter().map(|(k, p)| (k.clone(), p.label.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxRounds,
    PerfectValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub dataset: String,
    pub config: TrainerConfig,
    pub split: SplitAssignment,
    pub rounds: Vec<NarrativeRound>,
    pub best_round_index: Option<usize>,
    /// `None` while the run is in progress or was interrupted.
    pub stop_reason: Option<StopReason>,
    pub created_at: DateTime<Utc>,
}

impl RunRecord {
    pub fn overseer_model(&self) -> &str {
        &self.config.overseer.model
    }

    pub fn best_round(&self) -> Option<&NarrativeRound> {
        self.best_round_index.and_then(|i| self.rounds.get(i))
    }

    pub fn validation_history(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.validation_metrics.accuracy).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.stop_reason.is_some()
    }
}

/// First index of the maximum; `None` on empty input.
pub fn best_index(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in history.iter().enumerate() {
        if best.is_none_or(|b| *v > history[b]) {
            best = Some(i);
        }
    }
    best
}

/// True once `patience` rounds have passed without beating the best.
pub fn patience_stop(validation_history: &[f64], patience: usize) -> bool {
    match best_index(validation_history) {
        Some(b) => validation_history.len() - 1 - b >= patience,
        None => false,
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

/// Where a run is persisted as it progresses.
pub trait RunSink {
    fn begin(&mut self, run: &RunRecord) -> Result<(), String>;
    fn round(&mut self, run_id: &str, round: &NarrativeRound) -> Result<(), String>;
    fn finish(&mut self, run: &RunRecord) -> Result<(), String>;
}

/// Sink that keeps nothing.
pub struct NullSink;

impl RunSink for NullSink {
    fn begin(&mut self, _: &RunRecord) -> Result<(), String> {
        Ok(())
    }
    fn round(&mut self, _: &str, _: &NarrativeRound) -> Result<(), String> {
        Ok(())
    }
    fn finish(&mut self, _: &RunRecord) -> Result<(), String> {
        Ok(())
    }
}

pub fn underling_system(ds: &Dataset) -> String {
    let [pos, neg] = ds.labels();
    format!(
        "You classify one row of data at a time by following the rules you are given. \
         The outcome `{}` is either \"{pos}\" or \"{neg}\". Reply with exactly one of those labels and nothing else.",
        ds.target_name
    )
}

pub fn underling_message(prompt: &str, rendered_row: &str, ds: &Dataset) -> String {
    let [pos, neg] = ds.labels();
    format!("Rules:\n{prompt}\n\nRow:\n{rendered_row}\n\nAnswer \"{pos}\" or \"{neg}\".")
}

fn is_fatal(e: &GatewayError) -> bool {
    matches!(e, GatewayError::Auth { .. } | GatewayError::Config(_))
}

/// One underling call per row with at most `concurrency` in flight.
pub fn evaluate_narrative(
    prompt: &str,
    rows: &[&Row],
    ds: &Dataset,
    gateway: &Gateway,
    concurrency: usize,
) -> Result<BTreeMap<RowId, Prediction>, TrainerError> {
    let system = underling_system(ds);
    let labels = ds.labels();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let results: Mutex<Vec<Option<Result<Prediction, GatewayError>>>> = Mutex::new((0..rows.len()).map(|_| None).collect());
    let workers = concurrency.max(1).min(rows.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(row) = rows.get(i) else { break };
                let req = ChatRequest::new(
                    system.clone(),
                    underling_message(prompt, &render_row(row, &ds.schema), ds),
                    ResponseHint::BareLabel,
                );
                let outcome = match gateway.complete(&req) {
                    Ok(text) => Ok(match parse_underling_reply(&text, labels) {
                        Ok(reply) => Prediction { label: reply.label, flag: PredictionFlag::Ok },
                        Err(_) => Prediction { label: ds.other_label(&row.label).to_string(), flag: PredictionFlag::Unparseable },
                    }),
                    Err(e) => {
                        if is_fatal(&e) {
                            abort.store(true, Ordering::SeqCst);
                        }
                        Err(e)
                    }
                };
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });
    let results = results.into_inner().unwrap();
    let mut out = BTreeMap::new();
    let mut failed = 0;
    let mut last_err = None;
    for (row, res) in rows.iter().zip(results) {
        match res {
            Some(Ok(p)) => {
                out.insert(row.id.clone(), p);
            }
            Some(Err(e)) => {
                if is_fatal(&e) {
                    return Err(TrainerError::Fatal(e));
                }
                failed += 1;
                warn!("underling failed on row {}: {e}", row.id);
                last_err = Some(e.to_string());
                out.insert(row.id.clone(), Prediction { label: ds.other_label(&row.label).to_string(), flag: PredictionFlag::Failed });
            }
            None => {
                return Err(TrainerError::Fatal(GatewayError::Config("evaluation aborted".into())));
            }
        }
    }
    if failed * 2 > rows.len() {
        return Err(TrainerError::Underling { failed, total: rows.len(), last: last_err.unwrap_or_default() });
    }
    Ok(out)
}

fn local_random(rows: &[&Row], ds: &Dataset, seed: u64) -> BTreeMap<RowId, Prediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = ds.labels();
    let mut ids: Vec<&RowId> = rows.iter().map(|r| &r.id).collect();
    ids.sort();
    ids.into_iter()
        .map(|id| (id.clone(), Prediction { label: labels[rng.random_range(0..2)].to_string(), flag: PredictionFlag::LocalRandom }))
        .collect()
}

/// Up to `k` ids per confusion quadrant, drawn from training rows only.
pub fn sample_feedback_examples(
    predictions: &BTreeMap<RowId, String>,
    truth: &BTreeMap<RowId, String>,
    train_ids: &BTreeSet<RowId>,
    positive_label: &str,
    k: usize,
    seed: u64,
) -> QuadrantSamples {
    let mut quads: [Vec<RowId>; 4] = Default::default();
    for id in train_ids {
        let (Some(p), Some(t)) = (predictions.get(id), truth.get(id)) else { continue };
        let q = match (p == positive_label, t == positive_label) {
            (true, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
            (false, true) => 3,
        };
        quads[q].push(id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (stream, q) in quads.iter_mut().enumerate() {
        rng.set_stream(stream as u64);
        q.shuffle(&mut rng);
        q.truncate(k);
    }
    let [tp, fp, tn, fn_] = quads;
    QuadrantSamples { tp, fp, tn, fn_ }
}

fn round_seed(seed: u64, round: usize) -> u64 {
    seed ^ (round as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn fmt_metrics(m: &MetricsReport) -> String {
    format!(
        "accuracy {:.3}, precision {:.3}, recall {:.3}, F1 {:.3} ({} rows: {} true positives, {} false positives, {} true negatives, {} false negatives)",
        m.accuracy, m.precision, m.recall, m.f1, m.counts.total(), m.counts.tp, m.counts.fp, m.counts.tn, m.counts.fn_
    )
}

/// The overseer's user message after `history.last()` was evaluated.
pub fn build_overseer_message(
    history: &[NarrativeRound],
    samples: &QuadrantSamples,
    ds: &Dataset,
) -> String {
    let mut m = String::new();
    m.push_str(OVERSEER_PROMPT);
    m.push_str("\n\n## Prompts used so far, with their results on the training data\n");
    for r in history {
        m.push_str(&format!("\n### Round {}\nPrompt:\n\"\"\"\n{}\n\"\"\"\nResult: {}\n", r.index, r.prompt, fmt_metrics(&r.train_metrics)));
    }
    let [pos, neg] = ds.labels();
    let current = history.last().map(|r| r.index).unwrap_or(0);
    m.push_str(&format!("\n## Examples from the training data under the round {current} prompt\n"));
    let groups: [(&str, &[RowId], &str, &str); 4] = [
        ("True positives", &samples.tp, pos, pos),
        ("False positives", &samples.fp, neg, pos),
        ("True negatives", &samples.tn, neg, neg),
        ("False negatives", &samples.fn_, pos, neg),
    ];
    for (title, ids, actual, predicted) in groups {
        m.push_str(&format!("\n### {title}\n"));
        if ids.is_empty() {
            m.push_str("(none)\n");
        }
        for id in ids {
            let Some(row) = ds.row(id) else { continue };
            m.push_str(&format!(
                "\nExample row {id}:\n{}\nActual outcome: {actual}\nPredicted outcome: {predicted}\n",
                render_row(row, &ds.schema)
            ));
        }
    }
    m.push_str(&format!(
        "\n## Reply format\nReply with one JSON object: {{\"narration\": \"<your reasoning about what should change>\", \
         \"prompt\": \"<the complete new prompt>\"}}. The prompt must tell the model to answer with exactly \"{pos}\" or \"{neg}\".\n"
    ));
    m
}

/// Row ids named in an overseer message.
pub fn message_row_ids(message: &str) -> Vec<RowId> {
    message
        .lines()
        .filter_map(|l| l.strip_prefix("Example row "))
        .filter_map(|l| l.strip_suffix(':'))
        .map(RowId::from)
        .collect()
}

pub struct Trainer {
    pub cfg: TrainerConfig,
    pub overseer: Gateway,
    pub underling: Gateway,
    pub clock: Arc<dyn Clock>,
    pub interrupt: Option<Arc<AtomicBool>>,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig, overseer: Gateway, underling: Gateway) -> Self {
        Trainer { cfg, overseer, underling, clock: Arc::new(SystemClock), interrupt: None }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_interrupt(mut self, flag: Arc<AtomicBool>) -> Self {
        self.interrupt = Some(flag);
        self
    }

    pub fn run(&self, ds: &Dataset, split: &SplitAssignment, sink: &mut dyn RunSink) -> Result<RunRecord, TrainerError> {
        self.cfg.validate()?;
        split.check_against(ds).map_err(|e| TrainerError::Config(e.to_string()))?;
        let run = RunRecord {
            run_id: self.cfg.run_id.clone().unwrap_or_else(|| self.cfg.derived_run_id(&ds.name)),
            dataset: ds.name.clone(),
            config: self.cfg.clone(),
            split: split.clone(),
            rounds: vec![],
            best_round_index: None,
            stop_reason: None,
            created_at: self.clock.now(),
        };
        sink.begin(&run).map_err(TrainerError::Sink)?;
        self.drive(ds, run, sink)
    }

    /// Continues a persisted, unfinished run from its last durable round.
    pub fn resume(&self, ds: &Dataset, partial: RunRecord, sink: &mut dyn RunSink) -> Result<RunRecord, TrainerError> {
        if partial.dataset != ds.name {
            return Err(TrainerError::Resume(format!("run is for `{}`, not `{}`", partial.dataset, ds.name)));
        }
        if partial.is_complete() {
            return Ok(partial);
        }
        if partial.config != self.cfg {
            return Err(TrainerError::Resume("trainer config differs from the persisted run".into()));
        }
        partial.split.check_against(ds).map_err(|e| TrainerError::Resume(e.to_string()))?;
        self.drive(ds, partial, sink)
    }

    fn stop_reason(&self, run: &RunRecord) -> Option<StopReason> {
        let last = run.rounds.last()?;
        if last.validation_metrics.accuracy >= 1.0 {
            return Some(StopReason::PerfectValidation);
        }
        if patience_stop(&run.validation_history(), self.cfg.patience) {
            return Some(StopReason::Patience);
        }
        if run.rounds.len() >= self.cfg.max_rounds {
            return Some(StopReason::MaxRounds);
        }
        None
    }

    fn drive(&self, ds: &Dataset, mut run: RunRecord, sink: &mut dyn RunSink) -> Result<RunRecord, TrainerError> {
        let truth = ds.truth();
        let split = run.split.clone();
        let eval_ids: BTreeSet<RowId> = split.ids(Split::Train).union(split.ids(Split::Validation)).cloned().collect();
        let eval_rows: Vec<&Row> = ds.rows_in(&eval_ids).collect();
        run.best_round_index = best_index(&run.validation_history());
        loop {
            if let Some(reason) = self.stop_reason(&run) {
                run.stop_reason = Some(reason);
                sink.finish(&run).map_err(TrainerError::Sink)?;
                info!("run {} stopped ({reason:?}) after {} rounds", run.run_id, run.rounds.len());
                return Ok(run);
            }
            if self.interrupt.as_ref().is_some_and(|f| f.load(Ordering::SeqCst)) {
                info!("run {} interrupted after {} rounds", run.run_id, run.rounds.len());
                return Ok(run);
            }
            let index = run.rounds.len();
            let started_at = self.clock.now();
            let (prompt, narration, overseer_message) = if index == 0 {
                (ROUND_ZERO_PROMPT.to_string(), String::new(), None)
            } else {
                let prev = run.rounds.last().unwrap();
                let message = build_overseer_message(&run.rounds, &prev.quadrant_samples, ds);
                let reply = self.ask_overseer(&message)?;
                (reply.prompt, reply.narration, Some(message))
            };
            let predictions = if index == 0 && self.cfg.local_random_first_round {
                local_random(&eval_rows, ds, round_seed(self.cfg.seed, 0))
            } else {
                evaluate_narrative(&prompt, &eval_rows, ds, &self.underling, self.cfg.concurrency)?
            };
            let labels: BTreeMap<RowId, String> = predictions.iter().map(|(k, p)| (k.clone(), p.label.clone())).collect();
            let subset = |ids: &BTreeSet<RowId>| -> (BTreeMap<RowId, String>, BTreeMap<RowId, String>) {
                let p = ids.iter().map(|id| (id.clone(), labels[id].clone())).collect();
                let t = ids.iter().map(|id| (id.clone(), truth[id].clone())).collect();
                (p, t)
            };
            let (tp, tt) = subset(split.ids(Split::Train));
            let (vp, vt) = subset(split.ids(Split::Validation));
            let train_metrics = evaluate(&tp, &tt, &ds.positive_label)?;
            let validation_metrics = evaluate(&vp, &vt, &ds.positive_label)?;
            let quadrant_samples = sample_feedback_examples(
                &tp,
                &tt,
                split.ids(Split::Train),
                &ds.positive_label,
                self.cfg.examples_per_quadrant,
                round_seed(self.cfg.seed, index),
            );
            let round = NarrativeRound {
                index,
                prompt,
                narration,
                overseer_message,
                train_metrics,
                validation_metrics,
                predictions,
                quadrant_samples,
                started_at,
                finished_at: self.clock.now(),
            };
            info!(
                "run {} round {index}: train accuracy {:.3}, validation accuracy {:.3}",
                run.run_id, round.train_metrics.accuracy, round.validation_metrics.accuracy
            );
            sink.round(&run.run_id, &round).map_err(TrainerError::Sink)?;
            run.rounds.push(round);
            run.best_round_index = best_index(&run.validation_history());
        }
    }

    fn ask_overseer(&self, message: &str) -> Result<crate::gateway::OverseerReply, TrainerError> {
        let mut last = None;
        for attempt in 0..=self.cfg.overseer_parse_retries {
            let user = if attempt == 0 {
                message.to_string()
            } else {
                format!(
                    "{message}\n(Attempt {}: the previous reply did not contain a JSON object with a \"prompt\" key. Reply with the JSON object only.)\n",
                    attempt + 1
                )
            };
            let text = self.overseer.complete(&ChatRequest::new(OVERSEER_SYSTEM, user, ResponseHint::JsonObject)).map_err(TrainerError::Overseer)?;
            match parse_overseer_reply(&text) {
                Ok(reply) => return Ok(reply),
                Err(e) => {
                    warn!("overseer reply unparseable (attempt {}): {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(TrainerError::Overseer(last.unwrap()))
    }
}

/// Runs a fresh training loop with the system clock and no persistence
/// beyond `sink`.
pub fn run_training(
    cfg: &TrainerConfig,
    ds: &Dataset,
    split: &SplitAssignment,
    overseer: &Gateway,
    underling: &Gateway,
    sink: &mut dyn RunSink,
) -> Result<RunRecord, TrainerError> {
    Trainer::new(cfg.clone(), overseer.clone(), underling.clone()).run(ds, split, sink)
}

/// The best round's prompt scored on the held-out test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestEvaluation {
    pub run_id: String,
    pub round_index: usize,
    pub metrics: MetricsReport,
    pub predictions: BTreeMap<RowId, Prediction>,
    pub evaluated_at: DateTime<Utc>,
}

pub fn evaluate_on_test(
    run: &RunRecord,
    ds: &Dataset,
    underling: &Gateway,
    concurrency: usize,
    clock: &dyn Clock,
) -> Result<TestEvaluation, TrainerError> {
    let best = run.best_round().ok_or_else(|| TrainerError::Resume(format!("run {} has no completed round", run.run_id)))?;
    let ids = run.split.ids(Split::Test);
    let rows: Vec<&Row> = ds.rows_in(ids).collect();
    let predictions = if rows.is_empty() {
        BTreeMap::new()
    } else {
        evaluate_narrative(&best.prompt, &rows, ds, underling, concurrency)?
    };
    let preds: BTreeMap<RowId, String> = predictions.iter().map(|(k, p)| (k.clone(), p.label.clone())).collect();
    let truth: BTreeMap<RowId, String> = rows.iter().map(|r| (r.id.clone(), r.label.clone())).collect();
    let metrics = evaluate(&preds, &truth, &ds.positive_label)?;
    Ok(TestEvaluation { run_id: run.run_id.clone(), round_index: best.index, metrics, predictions, evaluated_at: clock.now() })
}
