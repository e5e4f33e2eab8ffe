//! Conventional baselines fitted on the training split only: majority-class
//! dummy, L2-regularised logistic regression and a small CART tree.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Cell, ColumnKind, Dataset, RowId, Split, SplitAssignment};
use crate::metrics::{evaluate, MetricsError, MetricsReport};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("training split is empty")]
    EmptyTrain,
    #[error("logistic regression needs at least 2 rows of each class, got {pos} positive / {neg} negative")]
    TooFewPerClass { pos: usize, neg: usize },
    #[error("no usable feature columns")]
    NoFeatures,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub source: String,
    /// Set for one-hot indicators.
    pub category: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

/// How rows become feature vectors; everything here is learned from the
/// training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub columns: Vec<FeatureColumn>,
    /// Standardisation per numeric source column.
    pub numeric: BTreeMap<String, ColumnStats>,
    /// One-hot categories and the fill value for missing cells.
    pub categorical: BTreeMap<String, (Vec<String>, String)>,
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub row_ids: Vec<RowId>,
    pub columns: Vec<FeatureColumn>,
    pub values: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }
}

impl Encoder {
    pub fn fit(ds: &Dataset, train: &BTreeSet<RowId>) -> Result<Encoder, BaselineError> {
        if train.is_empty() {
            return Err(BaselineError::EmptyTrain);
        }
        let rows: Vec<_> = ds.rows_in(train).collect();
        let mut enc = Encoder { columns: vec![], numeric: BTreeMap::new(), categorical: BTreeMap::new(), dropped: vec![] };
        for col in &ds.schema {
            match col.kind {
                ColumnKind::Numeric => {
                    let xs: Vec<f64> = rows.iter().filter_map(|r| r.get(&col.name).as_number()).collect();
                    if xs.is_empty() {
                        warn!("dropping `{}`: no training values", col.name);
                        enc.dropped.push(col.name.clone());
                        continue;
                    }
                    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                    // Missing cells take the mean and so add no variance.
                    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / rows.len() as f64;
                    if var <= 1e-24 {
                        warn!("dropping `{}`: zero variance on the training split", col.name);
                        enc.dropped.push(col.name.clone());
                        continue;
                    }
                    enc.numeric.insert(col.name.clone(), ColumnStats { mean, std: var.sqrt() });
                    enc.columns.push(FeatureColumn { source: col.name.clone(), category: None });
                }
                ColumnKind::Categorical => {
                    let cats = col.categories.clone().unwrap_or_default();
                    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                    for r in &rows {
                        if let Cell::Text(v) = r.get(&col.name) {
                            *counts.entry(v.as_str()).or_default() += 1;
                        }
                    }
                    // Most frequent training category; earliest listed on ties.
                    let mode = cats
                        .iter()
                        .max_by(|a, b| {
                            let (ca, cb) = (counts.get(a.as_str()).unwrap_or(&0), counts.get(b.as_str()).unwrap_or(&0));
                            ca.cmp(cb).then_with(|| {
                                let pa = cats.iter().position(|c| c == *a);
                                let pb = cats.iter().position(|c| c == *b);
                                pb.cmp(&pa)
                            })
                        })
                        .cloned()
                        .unwrap_or_default();
                    for c in &cats {
                        enc.columns.push(FeatureColumn { source: col.name.clone(), category: Some(c.clone()) });
                    }
                    enc.categorical.insert(col.name.clone(), (cats, mode));
                }
                ColumnKind::Text => {
                    warn!("dropping free-text column `{}`", col.name);
                    enc.dropped.push(col.name.clone());
                }
            }
        }
        if enc.columns.is_empty() {
            return Err(BaselineError::NoFeatures);
        }
        Ok(enc)
    }

    pub fn transform(&self, ds: &Dataset, ids: &BTreeSet<RowId>) -> FeatureMatrix {
        let mut row_ids = vec![];
        let mut values = vec![];
        for row in ds.rows_in(ids) {
            let mut v = Vec::with_capacity(self.columns.len());
            for fc in &self.columns {
                match &fc.category {
                    None => {
                        let s = self.numeric[&fc.source];
                        let x = row.get(&fc.source).as_number().unwrap_or(s.mean);
                        v.push((x - s.mean) / s.std);
                    }
                    Some(cat) => {
                        let (_, mode) = &self.categorical[&fc.source];
                        let value = match row.get(&fc.source) {
                            Cell::Text(t) => t.as_str(),
                            _ => mode.as_str(),
                        };
                        v.push(if value == cat { 1.0 } else { 0.0 });
                    }
                }
            }
            row_ids.push(row.id.clone());
            values.push(v);
        }
        FeatureMatrix { row_ids, columns: self.columns.clone(), values }
    }
}

/// Fits the encoder on train and encodes every row.
pub fn encode(ds: &Dataset, split: &SplitAssignment) -> Result<(Encoder, FeatureMatrix), BaselineError> {
    let enc = Encoder::fit(ds, split.ids(Split::Train))?;
    let all: BTreeSet<RowId> = ds.rows.iter().map(|r| r.id.clone()).collect();
    let fm = enc.transform(ds, &all);
    Ok((enc, fm))
}

fn labels_for(ds: &Dataset, fm: &FeatureMatrix) -> Vec<bool> {
    let idx = ds.index();
    fm.row_ids.iter().map(|id| idx[id].label == ds.positive_label).collect()
}

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRegHyper {
    pub learning_rate: f64,
    pub l2: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
}

impl Default for LogRegHyper {
    fn default() -> Self {
        LogRegHyper { learning_rate: 0.1, l2: 1e-3, max_epochs: 5000, tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub hyper: LogRegHyper,
    pub converged: bool,
    pub epochs: usize,
    pub loss: f64,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Mean log-loss plus `l2/2 * |w|^2` (the bias is not penalised).
pub fn logreg_loss(w: &[f64], b: f64, x: &[Vec<f64>], y: &[bool], l2: f64) -> f64 {
    let n = x.len() as f64;
    let data: f64 = x.iter().zip(y).map(|(xi, &yi)| {
        let z = dot(w, xi) + b;
        softplus(z) - if yi { z } else { 0.0 }
    }).sum::<f64>() / n;
    data + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Gradient of [`logreg_loss`]: `(dw, db)`.
pub fn logreg_gradient(w: &[f64], b: f64, x: &[Vec<f64>], y: &[bool], l2: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let r = sigmoid(dot(w, xi) + b) - if yi { 1.0 } else { 0.0 };
        for (g, v) in gw.iter_mut().zip(xi) {
            *g += r * v;
        }
        gb += r;
    }
    for (g, wi) in gw.iter_mut().zip(w) {
        *g = *g / n + l2 * wi;
    }
    (gw, gb / n)
}

/// Full-batch gradient descent; `trace` receives the loss before each step.
pub fn logreg_fit_traced(
    x: &[Vec<f64>],
    y: &[bool],
    hyper: LogRegHyper,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<LinearModel, BaselineError> {
    let pos = y.iter().filter(|v| **v).count();
    let neg = y.len() - pos;
    if pos < 2 || neg < 2 {
        return Err(BaselineError::TooFewPerClass { pos, neg });
    }
    let d = x[0].len();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let mut best = (w.clone(), b, f64::INFINITY);
    let mut converged = false;
    let mut epochs = 0;
    for epoch in 0..hyper.max_epochs {
        let loss = logreg_loss(&w, b, x, y, hyper.l2);
        if let Some(t) = trace.as_deref_mut() {
            t.push(loss);
        }
        if loss < best.2 {
            best = (w.clone(), b, loss);
        }
        let (gw, gb) = logreg_gradient(&w, b, x, y, hyper.l2);
        let norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        epochs = epoch;
        if norm < hyper.tolerance {
            converged = true;
            break;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= hyper.learning_rate * g;
        }
        b -= hyper.learning_rate * gb;
        epochs = epoch + 1;
    }
    if !converged {
        let loss = logreg_loss(&w, b, x, y, hyper.l2);
        if loss < best.2 {
            best = (w, b, loss);
        }
        warn!("logistic regression stopped at the epoch cap without reaching tolerance");
    }
    Ok(LinearModel { weights: best.0, bias: best.1, hyper, converged, epochs, loss: best.2 })
}

pub fn logreg_fit(x: &[Vec<f64>], y: &[bool], hyper: LogRegHyper) -> Result<LinearModel, BaselineError> {
    logreg_fit_traced(x, y, hyper, None)
}

/// `true` (positive) where the fitted probability is at least 1/2.
pub fn logreg_predict(model: &LinearModel, x: &[Vec<f64>]) -> Vec<bool> {
    x.iter().map(|xi| sigmoid(dot(&model.weights, xi) + model.bias) >= 0.5).collect()
}

// ---------------------------------------------------------------------------
// Decision tree
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeHyper {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeHyper {
    fn default() -> Self {
        TreeHyper { max_depth: 4, min_leaf: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf { positive: usize, negative: usize },
    Split { feature: usize, threshold: f64, left: Box<TreeNode>, right: Box<TreeNode> },
}

impl TreeNode {
    fn leaf(y: &[bool], idx: &[usize]) -> TreeNode {
        let positive = idx.iter().filter(|&&i| y[i]).count();
        TreeNode::Leaf { positive, negative: idx.len() - positive }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub root: TreeNode,
    pub hyper: TreeHyper,
    pub features: Vec<FeatureColumn>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

fn grow(x: &[Vec<f64>], y: &[bool], idx: Vec<usize>, depth: usize, hyper: TreeHyper) -> TreeNode {
    let n = idx.len();
    let pos = idx.iter().filter(|&&i| y[i]).count();
    if depth >= hyper.max_depth || pos == 0 || pos == n || n < 2 * hyper.min_leaf.max(1) {
        return TreeNode::leaf(y, &idx);
    }
    let parent = gini(pos, n) * n as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    let width = x[idx[0]].len();
    for f in 0..width {
        let mut order = idx.clone();
        order.sort_by(|&a, &b| x[a][f].partial_cmp(&x[b][f]).unwrap());
        let mut left_pos = 0;
        for cut in 1..n {
            if y[order[cut - 1]] {
                left_pos += 1;
            }
            let (lo, hi) = (x[order[cut - 1]][f], x[order[cut]][f]);
            if lo == hi || cut < hyper.min_leaf.max(1) || n - cut < hyper.min_leaf.max(1) {
                continue;
            }
            let impurity = gini(left_pos, cut) * cut as f64 + gini(pos - left_pos, n - cut) * (n - cut) as f64;
            if impurity < parent - 1e-12 && best.is_none_or(|(b, _, _)| impurity < b - 1e-12) {
                best = Some((impurity, f, lo + (hi - lo) / 2.0));
            }
        }
    }
    match best {
        None => TreeNode::leaf(y, &idx),
        Some((_, feature, threshold)) => {
            let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| x[i][feature] <= threshold);
            TreeNode::Split {
                feature,
                threshold,
                left: Box::new(grow(x, y, l, depth + 1, hyper)),
                right: Box::new(grow(x, y, r, depth + 1, hyper)),
            }
        }
    }
}

pub fn tree_fit(fm: &FeatureMatrix, y: &[bool], hyper: TreeHyper) -> Result<TreeModel, BaselineError> {
    if fm.rows() == 0 {
        return Err(BaselineError::EmptyTrain);
    }
    let root = grow(&fm.values, y, (0..fm.rows()).collect(), 0, hyper);
    Ok(TreeModel { root, hyper, features: fm.columns.clone() })
}

/// Majority label of the leaf `x` lands in; ties predict positive.
pub fn tree_predict(model: &TreeModel, x: &[f64]) -> bool {
    let mut node = &model.root;
    loop {
        match node {
            TreeNode::Leaf { positive, negative } => return positive >= negative,
            TreeNode::Split { feature, threshold, left, right } => {
                node = if x[*feature] <= *threshold { left } else { right };
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Running baselines end to end
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Dummy,
    Logreg,
    Tree,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Dummy => "dummy",
            BaselineKind::Logreg => "logreg",
            BaselineKind::Tree => "tree",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dummy" => Ok(BaselineKind::Dummy),
            "logreg" | "logistic" => Ok(BaselineKind::Logreg),
            "tree" | "cart" => Ok(BaselineKind::Tree),
            other => Err(format!("unknown baseline `{other}` (expected dummy, logreg or tree)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub dataset: String,
    pub model: BaselineKind,
    pub train_metrics: MetricsReport,
    pub validation_metrics: MetricsReport,
    pub test_metrics: MetricsReport,
    pub test_predictions: BTreeMap<RowId, String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

fn metrics_on(ds: &Dataset, preds: &BTreeMap<RowId, String>, ids: &BTreeSet<RowId>) -> Result<MetricsReport, BaselineError> {
    let p: BTreeMap<RowId, String> = ids.iter().map(|id| (id.clone(), preds[id].clone())).collect();
    let t: BTreeMap<RowId, String> = ds.rows_in(ids).map(|r| (r.id.clone(), r.label.clone())).collect();
    Ok(evaluate(&p, &t, &ds.positive_label)?)
}

fn finish(
    ds: &Dataset,
    split: &SplitAssignment,
    model: BaselineKind,
    preds: BTreeMap<RowId, String>,
    notes: Vec<String>,
) -> Result<BaselineResult, BaselineError> {
    let on = |s: Split| metrics_on(ds, &preds, split.ids(s));
    Ok(BaselineResult {
        dataset: ds.name.clone(),
        model,
        train_metrics: on(Split::Train)?,
        validation_metrics: on(Split::Validation)?,
        test_metrics: on(Split::Test)?,
        test_predictions: split.ids(Split::Test).iter().map(|id| (id.clone(), preds[id].clone())).collect(),
        notes,
    })
}

/// Majority training label; ties go to the positive label.
pub fn dummy_label(ds: &Dataset, train: &BTreeSet<RowId>) -> String {
    let pos = ds.rows_in(train).filter(|r| r.label == ds.positive_label).count();
    let neg = train.len() - pos;
    if pos >= neg { ds.positive_label.clone() } else { ds.negative_label.clone() }
}

pub fn dummy_fit_predict(ds: &Dataset, split: &SplitAssignment) -> Result<BaselineResult, BaselineError> {
    let train = split.ids(Split::Train);
    if train.is_empty() {
        return Err(BaselineError::EmptyTrain);
    }
    let label = dummy_label(ds, train);
    let preds = ds.rows.iter().map(|r| (r.id.clone(), label.clone())).collect();
    finish(ds, split, BaselineKind::Dummy, preds, vec![])
}

pub fn run_baseline(ds: &Dataset, split: &SplitAssignment, kind: BaselineKind) -> Result<BaselineResult, BaselineError> {
    if kind == BaselineKind::Dummy {
        return dummy_fit_predict(ds, split);
    }
    let enc = Encoder::fit(ds, split.ids(Split::Train))?;
    let train = enc.transform(ds, split.ids(Split::Train));
    let y = labels_for(ds, &train);
    let all_ids: BTreeSet<RowId> = ds.rows.iter().map(|r| r.id.clone()).collect();
    let all = enc.transform(ds, &all_ids);
    let mut notes: Vec<String> = enc.dropped.iter().map(|c| format!("dropped column {c}")).collect();
    let positive: Vec<bool> = match kind {
        BaselineKind::Logreg => {
            let m = logreg_fit(&train.values, &y, LogRegHyper::default())?;
            if !m.converged {
                notes.push("logistic regression hit the epoch cap".into());
            }
            logreg_predict(&m, &all.values)
        }
        BaselineKind::Tree => {
            let m = tree_fit(&train, &y, TreeHyper::default())?;
            all.values.iter().map(|x| tree_predict(&m, x)).collect()
        }
        BaselineKind::Dummy => unreachable!(),
    };
    let preds = all
        .row_ids
        .iter()
        .zip(positive)
        .map(|(id, p)| (id.clone(), if p { ds.positive_label.clone() } else { ds.negative_label.clone() }))
        .collect();
    finish(ds, split, kind, preds, notes)
}
