#![allow(dead_code)]

pub mod resume;

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::{Arc, Mutex};

use narrative_core::data::{Cell, ColumnSchema, Dataset, Row, RowId, Split, SplitAssignment};
use narrative_core::gateway::{ChatRequest, FnProvider, Gateway};
use narrative_core::metrics::evaluate;
use narrative_core::trainer::{NarrativeRound, Prediction, PredictionFlag, QuadrantSamples, RunRecord, TrainerConfig};
use narrative_core::gateway::ProviderConfig;
use chrono::{DateTime, TimeZone, Utc};
use regex::Regex;

pub fn at(y: i32, m: u32, d: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(y, m, d, 0, 0, 0).unwrap()
}

/// `x` in 0..n with label "1" iff x >= n/2, plus a distractor column `z`.
pub fn threshold_dataset(n: usize) -> Dataset {
    let rows = (0..n)
        .map(|i| Row {
            id: RowId::from(i),
            values: [
                ("x".to_string(), Cell::Number(i as f64)),
                ("z".to_string(), Cell::Number(((i * 37) % n) as f64)),
            ]
            .into(),
            label: if i >= n / 2 { "1" } else { "0" }.into(),
        })
        .collect();
    Dataset::new("threshold", vec![ColumnSchema::numeric("x"), ColumnSchema::numeric("z")], "y", rows, "1", "0").unwrap()
}

fn hash_label(text: &str) -> &'static str {
    let mut h = DefaultHasher::new();
    text.hash(&mut h);
    if h.finish().is_multiple_of(2) { "1" } else { "0" }
}

/// Follows prompts of the form `label 1 if x >= T`; anything else gets a
/// label hashed from the request, so replies depend on content alone.
pub fn rule_follower(req: &ChatRequest) -> String {
    let rule = Regex::new(r"x >= (\d+(?:\.\d+)?)").unwrap();
    let row = Regex::new(r"(?m)^x: (-?\d+(?:\.\d+)?)$").unwrap();
    let rules = req.user.split("\n\nRow:\n").next().unwrap_or("");
    match (rule.captures(rules), row.captures(&req.user)) {
        (Some(t), Some(x)) => {
            let t: f64 = t[1].parse().unwrap();
            let x: f64 = x[1].parse().unwrap();
            if x >= t { "1" } else { "0" }.to_string()
        }
        _ => hash_label(&req.user).to_string(),
    }
}

pub fn underling() -> FnProvider {
    FnProvider::new("mock-underling", |req| Ok(rule_follower(req)))
}

/// Replies with `prompts[r - 1]` once `r` rounds have been evaluated (the
/// last prompt repeats), recording every message it is shown.
pub fn overseer(prompts: &[&str], log: Arc<Mutex<Vec<String>>>) -> FnProvider {
    let prompts: Vec<String> = prompts.iter().map(|s| s.to_string()).collect();
    FnProvider::new("mock-overseer", move |req| {
        log.lock().unwrap().push(req.user.clone());
        let rounds = req.user.matches("\n### Round ").count();
        let p = &prompts[(rounds.max(1) - 1).min(prompts.len() - 1)];
        Ok(serde_json::json!({"narration": format!("after {rounds} rounds"), "prompt": p}).to_string())
    })
}

pub fn gateway(p: FnProvider) -> Gateway {
    Gateway::new(Arc::new(p))
}

pub fn mock_config(seed: u64) -> TrainerConfig {
    let mut cfg = TrainerConfig::new(ProviderConfig::scripted("overseer.json"), ProviderConfig::scripted("underling.json"));
    cfg.overseer.model = "mock-overseer".into();
    cfg.underling.model = "mock-underling".into();
    cfg.seed = seed;
    cfg.concurrency = 4;
    cfg
}

/// A finished one-round run whose validation (and test) predictions are
/// exactly `preds`.
pub fn fake_run(id: &str, ds: &Dataset, split: &SplitAssignment, preds: &BTreeMap<RowId, String>, created: DateTime<Utc>) -> RunRecord {
    let truth = ds.truth();
    let on = |s: Split| {
        let ids = split.ids(s);
        let p: BTreeMap<RowId, String> = ids.iter().map(|i| (i.clone(), preds[i].clone())).collect();
        let t: BTreeMap<RowId, String> = ids.iter().map(|i| (i.clone(), truth[i].clone())).collect();
        evaluate(&p, &t, &ds.positive_label).unwrap()
    };
    let round = NarrativeRound {
        index: 0,
        prompt: format!("prompt of {id}"),
        narration: format!("narration of {id}"),
        overseer_message: None,
        train_metrics: on(Split::Train),
        validation_metrics: on(Split::Validation),
        predictions: preds
            .iter()
            .filter(|(k, _)| split.split_of(k) != Some(Split::Test))
            .map(|(k, v)| (k.clone(), Prediction { label: v.clone(), flag: PredictionFlag::Ok }))
            .collect(),
        quadrant_samples: QuadrantSamples::default(),
        started_at: created,
        finished_at: created,
    };
    let mut cfg = mock_config(0);
    cfg.overseer.model = format!("model-{id}");
    RunRecord {
        run_id: id.into(),
        dataset: ds.name.clone(),
        config: cfg,
        split: split.clone(),
        rounds: vec![round],
        best_round_index: Some(0),
        stop_reason: Some(narrative_core::trainer::StopReason::Patience),
        created_at: created,
    }
}
