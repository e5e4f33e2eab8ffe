//! Majority-vote ensembles of three trained narratives, chosen by exhaustive
//! search over triples on the validation split.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Row, RowId, Split, SplitAssignment};
use crate::gateway::Gateway;
use crate::metrics::{evaluate, MetricsError, MetricsReport};
use crate::trainer::{evaluate_narrative, RunRecord, TrainerError};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("need at least 3 runs, got {0}")]
    TooFewRuns(usize),
    #[error("run `{0}` appears more than once")]
    DuplicateRun(String),
    #[error("run `{0}` has no completed round")]
    NoBestRound(String),
    #[error("run `{0}` was trained on a different split")]
    SplitMismatch(String),
    #[error("run `{0}` lacks stored predictions and no gateway was given to re-evaluate")]
    MissingPredictions(String),
    #[error("run `{0}` is not part of the selection")]
    UnknownMember(String),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub fn majority_vote<'a>(a: &'a str, b: &'a str, c: &'a str) -> &'a str {
    if a == b || a == c {
        a
    } else {
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSelection {
    pub dataset: String,
    pub member_run_ids: [String; 3],
    pub member_round_indices: [usize; 3],
    pub member_models: [String; 3],
    pub validation_metrics: MetricsReport,
    pub test_metrics: Option<MetricsReport>,
    /// Per member run id, its validation predictions used for the vote.
    pub member_validation_predictions: BTreeMap<String, BTreeMap<RowId, String>>,
    #[serde(default)]
    pub member_test_predictions: BTreeMap<String, BTreeMap<RowId, String>>,
    pub triples_scored: usize,
    /// The newest member's creation time: when this ensemble became possible.
    pub date: DateTime<Utc>,
}

impl EnsembleSelection {
    /// Distinct overseer models, joined with `+`.
    pub fn model_label(&self) -> String {
        let set: BTreeSet<&str> = self.member_models.iter().map(String::as_str).collect();
        set.into_iter().collect::<Vec<_>>().join("+")
    }
}

/// Votes row by row over the rows all three members cover.
pub fn vote(members: [&BTreeMap<RowId, String>; 3]) -> BTreeMap<RowId, String> {
    members[0]
        .iter()
        .filter_map(|(id, a)| {
            let b = members[1].get(id)?;
            let c = members[2].get(id)?;
            Some((id.clone(), majority_vote(a, b, c).to_string()))
        })
        .collect()
}

fn restrict(map: &BTreeMap<RowId, String>, ids: &BTreeSet<RowId>) -> BTreeMap<RowId, String> {
    ids.iter().filter_map(|id| map.get(id).map(|l| (id.clone(), l.clone()))).collect()
}

fn truth_on(ds: &Dataset, ids: &BTreeSet<RowId>) -> BTreeMap<RowId, String> {
    ds.rows_in(ids).map(|r| (r.id.clone(), r.label.clone())).collect()
}

/// Each run's best-round labels on `ids`, re-evaluated through `gateway`
/// where the stored predictions do not cover them.
fn member_predictions(
    run: &RunRecord,
    ds: &Dataset,
    ids: &BTreeSet<RowId>,
    gateway: Option<&Gateway>,
    concurrency: usize,
) -> Result<BTreeMap<RowId, String>, EnsembleError> {
    let best = run.best_round().ok_or_else(|| EnsembleError::NoBestRound(run.run_id.clone()))?;
    let stored = restrict(&best.labels(), ids);
    if stored.len() == ids.len() {
        return Ok(stored);
    }
    let gateway = gateway.ok_or_else(|| EnsembleError::MissingPredictions(run.run_id.clone()))?;
    let missing: BTreeSet<RowId> = ids.iter().filter(|id| !stored.contains_key(*id)).cloned().collect();
    let rows: Vec<&Row> = ds.rows_in(&missing).collect();
    let fresh = evaluate_narrative(&best.prompt, &rows, ds, gateway, concurrency)?;
    let mut all = stored;
    all.extend(fresh.into_iter().map(|(k, p)| (k, p.label)));
    Ok(all)
}

/// Tries every triple of `runs` on validation and keeps the most accurate;
/// ties go to the lexicographically smallest run-id triple.
pub fn select_best_triple(
    runs: &[RunRecord],
    ds: &Dataset,
    split: &SplitAssignment,
    gateway: Option<&Gateway>,
    concurrency: usize,
) -> Result<EnsembleSelection, EnsembleError> {
    if runs.len() < 3 {
        return Err(EnsembleError::TooFewRuns(runs.len()));
    }
    let mut sorted: Vec<&RunRecord> = runs.iter().collect();
    sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    for w in sorted.windows(2) {
        if w[0].run_id == w[1].run_id {
            return Err(EnsembleError::DuplicateRun(w[0].run_id.clone()));
        }
    }
    for r in &sorted {
        if &r.split != split {
            return Err(EnsembleError::SplitMismatch(r.run_id.clone()));
        }
    }
    let val_ids = split.ids(Split::Validation);
    let truth = truth_on(ds, val_ids);
    let preds: Vec<BTreeMap<RowId, String>> =
        sorted.iter().map(|r| member_predictions(r, ds, val_ids, gateway, concurrency)).collect::<Result<_, _>>()?;

    let n = sorted.len();
    let mut best: Option<([usize; 3], f64)> = None;
    let mut scored = 0;
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                scored += 1;
                let votes = vote([&preds[i], &preds[j], &preds[k]]);
                let correct = votes.iter().filter(|(id, l)| truth.get(*id) == Some(*l)).count();
                let acc = correct as f64 / truth.len() as f64;
                if best.is_none_or(|(_, b)| acc > b) {
                    best = Some(([i, j, k], acc));
                }
            }
        }
    }
    let ([i, j, k], _) = best.expect("at least one triple");
    let idx = [i, j, k];
    let votes = vote([&preds[i], &preds[j], &preds[k]]);
    let validation_metrics = evaluate(&votes, &truth, &ds.positive_label)?;
    let member = |m: usize| sorted[idx[m]];
    Ok(EnsembleSelection {
        dataset: ds.name.clone(),
        member_run_ids: [0, 1, 2].map(|m| member(m).run_id.clone()),
        member_round_indices: [0, 1, 2].map(|m| member(m).best_round_index.unwrap()),
        member_models: [0, 1, 2].map(|m| member(m).overseer_model().to_string()),
        validation_metrics,
        test_metrics: None,
        member_validation_predictions: (0..3).map(|m| (member(m).run_id.clone(), preds[idx[m]].clone())).collect(),
        member_test_predictions: BTreeMap::new(),
        triples_scored: scored,
        date: (0..3).map(|m| member(m).created_at).max().unwrap(),
    })
}

/// Scores the selection on the test split, querying members' best prompts
/// for test rows they have no stored prediction for.
pub fn evaluate_ensemble(
    sel: &mut EnsembleSelection,
    runs: &[RunRecord],
    ds: &Dataset,
    split: &SplitAssignment,
    gateway: Option<&Gateway>,
    concurrency: usize,
) -> Result<MetricsReport, EnsembleError> {
    let test_ids = split.ids(Split::Test);
    let mut member_preds = Vec::with_capacity(3);
    for id in &sel.member_run_ids {
        let run = runs.iter().find(|r| &r.run_id == id).ok_or_else(|| EnsembleError::UnknownMember(id.clone()))?;
        let cached = sel.member_test_predictions.get(id).filter(|p| test_ids.iter().all(|t| p.contains_key(t)));
        let preds = match cached {
            Some(p) => restrict(p, test_ids),
            None => member_predictions(run, ds, test_ids, gateway, concurrency)?,
        };
        member_preds.push(preds);
    }
    let votes = vote([&member_preds[0], &member_preds[1], &member_preds[2]]);
    let report = evaluate(&votes, &truth_on(ds, test_ids), &ds.positive_label)?;
    for (id, p) in sel.member_run_ids.clone().iter().zip(member_preds) {
        sel.member_test_predictions.insert(id.clone(), p);
    }
    sel.test_metrics = Some(report);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vote_truth_table() {
        for bits in 0..8u8 {
            let l = |b: u8| if bits >> b & 1 == 1 { "1" } else { "0" };
            let ones = bits.count_ones();
            let mode = if ones >= 2 { "1" } else { "0" };
            assert_eq!(majority_vote(l(0), l(1), l(2)), mode, "bits {bits:03b}");
        }
    }

    #[test]
    fn vote_ignores_uncovered_rows() {
        let a: BTreeMap<RowId, String> = [(RowId::from("x"), "1".into()), (RowId::from("y"), "0".into())].into();
        let b: BTreeMap<RowId, String> = [(RowId::from("x"), "1".into())].into();
        let v = vote([&a, &b, &a]);
        assert_eq!(v.len(), 1);
        assert_eq!(v[&RowId::from("x")], "1");
    }
}
