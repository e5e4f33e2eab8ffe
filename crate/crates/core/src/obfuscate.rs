//! Declarative dataset obfuscation and reverse translation of narratives.
//!
//! A [`TransformSpec`] is an ordered list of column steps read from JSON:
//!
//! ```json
//! {"dataset": "titanic",
//!  "steps": [
//!    {"op": "rename", "column": "PassengerId", "rename": "Patient_ID"},
//!    {"op": "impute_mean", "column": "Age"},
//!    {"op": "affine", "column": "Age", "a": 3, "b": 0, "rename": "Treatment_Months"},
//!    {"op": "relabel_values", "column": "Sex", "map": {"male": "female", "female": "male"}},
//!    {"op": "relabel_target", "column": "Survived", "map": {"0": "Success", "1": "Failure"}},
//!    {"op": "drop", "column": "Name"}
//!  ]}
//! ```
//!
//! Every step may carry `rename`, applied after the step's value change.
//! Numeric ops: `affine` (`a*x + b`, `a != 0`), `log1p`, `sqrt`,
//! `reciprocal1p` (`1/(x+1)`), `rank` (1..n, midranks for ties),
//! `impute_mean`, `invert_binary` (`1 - x` on a 0/1 column). Value ops:
//! `relabel_values` and `relabel_target` take a bijective `map`.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{format_number, Cell, ColumnKind, ColumnSchema, DataError, Dataset, RowId};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("transform spec: {0}")]
    Parse(String),
    #[error("step {step} ({op}): {reason}")]
    Step { step: usize, op: &'static str, reason: String },
    #[error("step {step} ({op}) failed on row {row}: {reason}")]
    Domain { step: usize, op: &'static str, row: RowId, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StepOp {
    Rename,
    Drop,
    RelabelValues { map: BTreeMap<String, String> },
    Affine { a: f64, #[serde(default)] b: f64 },
    Log1p,
    Sqrt,
    Reciprocal1p,
    Rank,
    ImputeMean,
    InvertBinary,
    RelabelTarget { map: BTreeMap<String, String> },
}

impl StepOp {
    pub fn name(&self) -> &'static str {
        match self {
            StepOp::Rename => "rename",
            StepOp::Drop => "drop",
            StepOp::RelabelValues { .. } => "relabel_values",
            StepOp::Affine { .. } => "affine",
            StepOp::Log1p => "log1p",
            StepOp::Sqrt => "sqrt",
            StepOp::Reciprocal1p => "reciprocal1p",
            StepOp::Rank => "rank",
            StepOp::ImputeMean => "impute_mean",
            StepOp::InvertBinary => "invert_binary",
            StepOp::RelabelTarget { .. } => "relabel_target",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformStep {
    #[serde(flatten)]
    pub op: StepOp,
    /// Column the step acts on. For `relabel_target` this is the original
    /// target name and is optional.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rename: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub dataset: String,
    #[serde(default)]
    pub steps: Vec<TransformStep>,
    /// Original column name to final name, for columns that survive.
    #[serde(skip)]
    pub name_map: BTreeMap<String, String>,
    /// Per original column: original value to final value.
    #[serde(skip)]
    pub value_maps: BTreeMap<String, BTreeMap<String, String>>,
}

/// Invertible numeric step on a column, as seen by reverse translation.
#[derive(Debug, Clone, Copy, PartialEq)]
enum NumericStep {
    Affine(f64, f64),
    Log1p,
    Sqrt,
    Reciprocal1p,
}

impl NumericStep {
    fn inverse(&self, y: f64) -> f64 {
        match *self {
            NumericStep::Affine(a, b) => (y - b) / a,
            NumericStep::Log1p => y.exp_m1(),
            NumericStep::Sqrt => y * y,
            NumericStep::Reciprocal1p => 1.0 / y - 1.0,
        }
    }

    fn decreasing(&self) -> bool {
        match *self {
            NumericStep::Affine(a, _) => a < 0.0,
            NumericStep::Reciprocal1p => true,
            _ => false,
        }
    }
}

/// What reverse translation needs to know about one final column.
#[derive(Debug, Clone, Default)]
struct Lineage {
    original: String,
    numeric: Vec<NumericStep>,
    ranked: bool,
    imputed: bool,
    /// final value -> original value
    values: BTreeMap<String, String>,
}

impl Lineage {
    fn new(original: &str) -> Self {
        Lineage { original: original.to_string(), ..Default::default() }
    }

    fn relabel(&mut self, map: &BTreeMap<String, String>) {
        let mut next = BTreeMap::new();
        for (old, new) in map {
            let orig = self.values.get(old).cloned().unwrap_or_else(|| old.clone());
            next.insert(new.clone(), orig);
        }
        for (fin, orig) in &self.values {
            if !map.contains_key(fin) {
                next.entry(fin.clone()).or_insert_with(|| orig.clone());
            }
        }
        self.values = next;
    }
}

#[derive(Debug, Default)]
struct Lineages {
    columns: BTreeMap<String, Lineage>,
    gone: BTreeSet<String>,
    target: Option<(String, Lineage)>,
}

impl Lineages {
    fn entry(&mut self, step: usize, op: &'static str, name: &str) -> Result<&mut Lineage, TransformError> {
        if !self.columns.contains_key(name) {
            if self.gone.contains(name) {
                return Err(TransformError::Parse(format!(
                    "step {step} ({op}) references `{name}`, which an earlier step renamed or dropped"
                )));
            }
            self.columns.insert(name.to_string(), Lineage::new(name));
        }
        Ok(self.columns.get_mut(name).unwrap())
    }

    fn rename(&mut self, step: usize, op: &'static str, from: &str, to: &str) -> Result<(), TransformError> {
        if from == to {
            return Ok(());
        }
        if self.columns.contains_key(to) {
            return Err(TransformError::Parse(format!("step {step} ({op}) renames `{from}` onto existing name `{to}`")));
        }
        let lin = self.columns.remove(from).unwrap();
        self.gone.insert(from.to_string());
        self.gone.remove(to);
        self.columns.insert(to.to_string(), lin);
        Ok(())
    }
}

fn check_bijective(step: usize, op: &'static str, map: &BTreeMap<String, String>) -> Result<(), TransformError> {
    let mut seen = HashSet::new();
    for v in map.values() {
        if !seen.insert(v) {
            return Err(TransformError::Parse(format!("step {step} ({op}) maps two values onto `{v}`")));
        }
    }
    Ok(())
}

impl TransformSpec {
    pub fn identity(dataset: &str) -> Self {
        TransformSpec { dataset: dataset.into(), steps: vec![], name_map: BTreeMap::new(), value_maps: BTreeMap::new() }
    }

    /// Runs the static checks and fills the derived maps.
    pub fn finalize(mut self) -> Result<Self, TransformError> {
        let lineages = self.lineages()?;
        self.name_map = lineages
            .columns
            .iter()
            .filter(|(fin, lin)| *fin != &lin.original)
            .map(|(fin, lin)| (lin.original.clone(), fin.clone()))
            .collect();
        if let Some((fin, lin)) = &lineages.target {
            if fin != &lin.original {
                self.name_map.insert(lin.original.clone(), fin.clone());
            }
        }
        self.value_maps = lineages
            .columns
            .values()
            .chain(lineages.target.iter().map(|(_, l)| l))
            .filter(|lin| !lin.values.is_empty())
            .map(|lin| {
                let forward = lin.values.iter().map(|(fin, orig)| (orig.clone(), fin.clone())).collect();
                (lin.original.clone(), forward)
            })
            .collect();
        Ok(self)
    }

    fn lineages(&self) -> Result<Lineages, TransformError> {
        let mut l = Lineages::default();
        for (i, step) in self.steps.iter().enumerate() {
            let op = step.op.name();
            if let StepOp::RelabelTarget { map } = &step.op {
                check_bijective(i, op, map)?;
                let (name, mut lin) = match l.target.take() {
                    Some(t) => t,
                    None => {
                        let orig = step.column.clone().unwrap_or_default();
                        (orig.clone(), Lineage::new(&orig))
                    }
                };
                lin.relabel(map);
                let name = step.rename.clone().unwrap_or(name);
                if !name.is_empty() && l.columns.contains_key(&name) {
                    return Err(TransformError::Parse(format!("step {i} renames the target onto column `{name}`")));
                }
                l.target = Some((name, lin));
                continue;
            }
            let Some(col) = step.column.as_deref() else {
                return Err(TransformError::Parse(format!("step {i} ({op}) needs a `column`")));
            };
            if col.is_empty() {
                return Err(TransformError::Parse(format!("step {i} ({op}) has an empty column name")));
            }
            let lin = l.entry(i, op, col)?;
            match &step.op {
                StepOp::Rename => {
                    if step.rename.is_none() {
                        return Err(TransformError::Parse(format!("step {i} (rename) needs `rename`")));
                    }
                }
                StepOp::Drop => {
                    if step.rename.is_some() {
                        return Err(TransformError::Parse(format!("step {i} (drop) cannot rename")));
                    }
                    l.columns.remove(col);
                    l.gone.insert(col.to_string());
                    continue;
                }
                StepOp::RelabelValues { map } => {
                    check_bijective(i, op, map)?;
                    lin.relabel(map);
                }
                StepOp::Affine { a, b } => {
                    if *a == 0.0 || !a.is_finite() || !b.is_finite() {
                        return Err(TransformError::Parse(format!("step {i} (affine) needs finite a != 0 and finite b")));
                    }
                    lin.numeric.push(NumericStep::Affine(*a, *b));
                }
                StepOp::Log1p => lin.numeric.push(NumericStep::Log1p),
                StepOp::Sqrt => lin.numeric.push(NumericStep::Sqrt),
                StepOp::Reciprocal1p => lin.numeric.push(NumericStep::Reciprocal1p),
                StepOp::InvertBinary => lin.numeric.push(NumericStep::Affine(-1.0, 1.0)),
                StepOp::Rank => lin.ranked = true,
                StepOp::ImputeMean => lin.imputed = true,
                StepOp::RelabelTarget { .. } => unreachable!(),
            }
            if let Some(to) = &step.rename {
                if to.is_empty() {
                    return Err(TransformError::Parse(format!("step {i} ({op}) renames to an empty name")));
                }
                if l.target.as_ref().is_some_and(|(t, _)| t == to) {
                    return Err(TransformError::Parse(format!("step {i} ({op}) renames onto the target `{to}`")));
                }
                l.rename(i, op, col, to)?;
            }
        }
        Ok(l)
    }
}

impl TransformSpec {
    /// Maps a value of masked column `column` back to its original column
    /// and scale. `None` if the column is unknown or was ranked.
    pub fn invert_value(&self, column: &str, value: f64) -> Option<(String, f64)> {
        let lin = self.lineages().ok()?;
        let l = lin.columns.get(column)?;
        if l.ranked {
            return None;
        }
        let v = l.numeric.iter().rev().fold(value, |y, step| step.inverse(y));
        Some((l.original.clone(), v))
    }
}

pub fn parse_transform_spec(text: &str) -> Result<TransformSpec, TransformError> {
    let spec: TransformSpec = serde_json::from_str(text).map_err(|e| TransformError::Parse(e.to_string()))?;
    spec.finalize()
}

// ---------------------------------------------------------------------------
// Applying
// ---------------------------------------------------------------------------

/// Ranks `1..=n` with the average rank for tied values.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn cell_key(cell: &Cell) -> Option<String> {
    cell.display_value()
}

pub fn apply_transforms(ds: &Dataset, spec: &TransformSpec) -> Result<Dataset, TransformError> {
    let mut out = ds.clone();
    for (i, step) in spec.steps.iter().enumerate() {
        apply_step(&mut out, i, step)?;
    }
    out.validate()?;
    Ok(out)
}

fn apply_step(ds: &mut Dataset, i: usize, step: &TransformStep) -> Result<(), TransformError> {
    let op = step.op.name();
    let step_err = |reason: String| TransformError::Step { step: i, op, reason };

    if let StepOp::RelabelTarget { map } = &step.op {
        if let Some(col) = &step.column {
            if col != &ds.target_name {
                return Err(step_err(format!("target is `{}`, not `{col}`", ds.target_name)));
            }
        }
        let pos = map.get(&ds.positive_label).ok_or_else(|| step_err(format!("map lacks `{}`", ds.positive_label)))?;
        let neg = map.get(&ds.negative_label).ok_or_else(|| step_err(format!("map lacks `{}`", ds.negative_label)))?;
        if pos == neg {
            return Err(step_err("both labels map to the same value".into()));
        }
        for row in &mut ds.rows {
            row.label = map[&row.label].clone();
        }
        ds.positive_label = pos.clone();
        ds.negative_label = neg.clone();
        if let Some(to) = &step.rename {
            if ds.column(to).is_some() {
                return Err(step_err(format!("`{to}` is already a column")));
            }
            ds.target_name = to.clone();
        }
        return Ok(());
    }

    let col_name = step.column.clone().ok_or_else(|| step_err("missing column".into()))?;
    let col_idx = ds
        .schema
        .iter()
        .position(|c| c.name == col_name)
        .ok_or_else(|| step_err(format!("no column `{col_name}` at this point")))?;
    let kind = ds.schema[col_idx].kind;
    let need_numeric = || {
        if kind == ColumnKind::Numeric {
            Ok(())
        } else {
            Err(step_err(format!("`{col_name}` is not numeric")))
        }
    };

    let numeric_map = |ds: &mut Dataset, f: &dyn Fn(f64) -> Result<f64, String>| -> Result<(), TransformError> {
        for row in &mut ds.rows {
            if let Some(Cell::Number(x)) = row.values.get(&col_name) {
                let y = f(*x).map_err(|reason| TransformError::Domain { step: i, op, row: row.id.clone(), reason })?;
                if !y.is_finite() {
                    return Err(TransformError::Domain { step: i, op, row: row.id.clone(), reason: format!("{x} maps to {y}") });
                }
                row.values.insert(col_name.clone(), Cell::Number(y));
            }
        }
        Ok(())
    };

    match &step.op {
        StepOp::Rename => {}
        StepOp::Drop => {
            ds.schema.remove(col_idx);
            for row in &mut ds.rows {
                row.values.remove(&col_name);
            }
            return Ok(());
        }
        StepOp::RelabelValues { map } => {
            let old_categories: Vec<String> = match kind {
                ColumnKind::Categorical => ds.schema[col_idx].categories.clone().unwrap_or_default(),
                ColumnKind::Numeric => {
                    let mut nums: Vec<f64> = ds.rows.iter().filter_map(|r| r.get(&col_name).as_number()).collect();
                    nums.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    nums.dedup();
                    nums.into_iter().map(format_number).collect()
                }
                ColumnKind::Text => {
                    let set: BTreeSet<String> = ds.rows.iter().filter_map(|r| cell_key(r.get(&col_name))).collect();
                    set.into_iter().collect()
                }
            };
            if let Some(missing) = old_categories.iter().find(|c| !map.contains_key(*c)) {
                return Err(step_err(format!("map has no entry for value `{missing}`")));
            }
            for row in &mut ds.rows {
                let cell = row.get(&col_name).clone();
                if let Some(key) = cell_key(&cell) {
                    let new = map.get(&key).ok_or_else(|| TransformError::Domain {
                        step: i,
                        op,
                        row: row.id.clone(),
                        reason: format!("value `{key}` is not in the map"),
                    })?;
                    row.values.insert(col_name.clone(), Cell::Text(new.clone()));
                }
            }
            let categories = old_categories.iter().map(|c| map[c].clone()).collect::<Vec<_>>();
            ds.schema[col_idx] = ColumnSchema::categorical(col_name.clone(), categories);
        }
        StepOp::Affine { a, b } => {
            need_numeric()?;
            let (a, b) = (*a, *b);
            if a == 0.0 {
                return Err(step_err("a must be nonzero".into()));
            }
            numeric_map(ds, &|x| Ok(a * x + b))?;
        }
        StepOp::Log1p => {
            need_numeric()?;
            numeric_map(ds, &|x| if x > -1.0 { Ok(x.ln_1p()) } else { Err(format!("log1p needs x > -1, got {x}")) })?;
        }
        StepOp::Sqrt => {
            need_numeric()?;
            numeric_map(ds, &|x| if x >= 0.0 { Ok(x.sqrt()) } else { Err(format!("sqrt needs x >= 0, got {x}")) })?;
        }
        StepOp::Reciprocal1p => {
            need_numeric()?;
            numeric_map(ds, &|x| {
                if x > -1.0 {
                    Ok(1.0 / (x + 1.0))
                } else {
                    Err(format!("reciprocal1p needs x > -1, got {x}"))
                }
            })?;
        }
        StepOp::InvertBinary => {
            need_numeric()?;
            numeric_map(ds, &|x| {
                if x == 0.0 || x == 1.0 {
                    Ok(1.0 - x)
                } else {
                    Err(format!("invert_binary needs 0 or 1, got {x}"))
                }
            })?;
        }
        StepOp::Rank => {
            need_numeric()?;
            let present: Vec<(usize, f64)> = ds
                .rows
                .iter()
                .enumerate()
                .filter_map(|(k, r)| r.get(&col_name).as_number().map(|x| (k, x)))
                .collect();
            let ranks = midranks(&present.iter().map(|p| p.1).collect::<Vec<_>>());
            for ((k, _), r) in present.iter().zip(ranks) {
                ds.rows[*k].values.insert(col_name.clone(), Cell::Number(r));
            }
        }
        StepOp::ImputeMean => {
            need_numeric()?;
            let present: Vec<f64> = ds.rows.iter().filter_map(|r| r.get(&col_name).as_number()).collect();
            if present.is_empty() {
                return Err(step_err(format!("`{col_name}` has no values to average")));
            }
            let mean = present.iter().sum::<f64>() / present.len() as f64;
            for row in &mut ds.rows {
                if row.get(&col_name).is_missing() {
                    row.values.insert(col_name.clone(), Cell::Number(mean));
                }
            }
        }
        StepOp::RelabelTarget { .. } => unreachable!(),
    }

    if let Some(to) = &step.rename {
        if to != &col_name {
            if ds.column(to).is_some() || to == &ds.target_name {
                return Err(step_err(format!("`{to}` already exists")));
            }
            ds.schema[col_idx].name = to.clone();
            for row in &mut ds.rows {
                if let Some(cell) = row.values.remove(&col_name) {
                    row.values.insert(to.clone(), cell);
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reverse translation
// ---------------------------------------------------------------------------

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn significant_digits(literal: &str) -> usize {
    let digits: String = literal.chars().filter(|c| c.is_ascii_digit() || *c == '.').collect();
    let has_point = digits.contains('.');
    let trimmed = digits.replace('.', "");
    let trimmed = trimmed.trim_start_matches('0');
    let trimmed = if has_point { trimmed } else { trimmed.trim_end_matches('0') };
    trimmed.len().max(1)
}

/// Formats `v` with `sig` significant digits, dropping trailing zeros.
fn format_significant(v: f64, sig: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format_number(v);
    }
    let magnitude = v.abs().log10().floor() as i64 + 1;
    let decimals = (sig as i64 - magnitude).max(0) as usize;
    let mut s = format!("{v:.decimals$}");
    if s.contains('.') {
        s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

fn flip_comparator(op: &str) -> &str {
    match op {
        "<" => ">",
        ">" => "<",
        "<=" => ">=",
        ">=" => "<=",
        "≤" => "≥",
        "≥" => "≤",
        other => other,
    }
}

enum Token<'a> {
    Column(&'a Lineage),
    Value(&'a str),
}

/// Rewrites a narrative written against the transformed data so it refers
/// to the original column names, category values and numeric scales.
///
/// Thresholds directly following a column name (`Col >= 10`) are mapped
/// through the inverse of the column's numeric steps; comparison operators
/// flip for decreasing transforms. Ranked columns keep their numbers and,
/// like imputed columns, get a note appended.
pub fn invert_narrative(text: &str, spec: &TransformSpec) -> String {
    let Ok(lineages) = spec.lineages() else {
        return text.to_string();
    };
    let mut tokens: Vec<(&str, Token)> = Vec::new();
    for (fin, lin) in &lineages.columns {
        tokens.push((fin.as_str(), Token::Column(lin)));
    }
    if let Some((fin, lin)) = &lineages.target {
        if !fin.is_empty() {
            tokens.push((fin.as_str(), Token::Column(lin)));
        }
    }
    let mut seen_values = HashSet::new();
    for lin in lineages.columns.values().chain(lineages.target.iter().map(|t| &t.1)) {
        for (fin, orig) in &lin.values {
            if fin != orig && seen_values.insert(fin.as_str()) {
                tokens.push((fin.as_str(), Token::Value(orig.as_str())));
            }
        }
    }
    tokens.sort_by_key(|t| std::cmp::Reverse(t.0.len()));

    let threshold = regex::Regex::new(r"^(\s*)(>=|<=|≥|≤|==|!=|=|<|>)(\s*)(-?\d+(?:\.\d+)?)").unwrap();
    let mut out = String::with_capacity(text.len());
    let mut notes: Vec<String> = Vec::new();
    let mut pos = 0;
    let mut prev: Option<char> = None;
    while pos < text.len() {
        let rest = &text[pos..];
        let at_boundary = prev.is_none_or(|c| !is_word(c));
        let mut matched = false;
        if at_boundary {
            for (tok, kind) in &tokens {
                if !rest.starts_with(tok) {
                    continue;
                }
                let after = rest[tok.len()..].chars().next();
                if after.is_some_and(is_word) {
                    continue;
                }
                let mut consumed = tok.len();
                match kind {
                    Token::Value(orig) => out.push_str(orig),
                    Token::Column(lin) => {
                        out.push_str(&lin.original);
                        if lin.ranked {
                            let note = format!(
                                "[Note: numbers for {} are ranks within the transformed data and were not converted.]",
                                lin.original
                            );
                            if !notes.contains(&note) {
                                notes.push(note);
                            }
                        }
                        if lin.imputed {
                            let note = format!("[Note: missing values of {} were imputed with the mean.]", lin.original);
                            if !notes.contains(&note) {
                                notes.push(note);
                            }
                        }
                        if !lin.ranked && !lin.numeric.is_empty() {
                            if let Some(c) = threshold.captures(&rest[tok.len()..]) {
                                let literal = &c[4];
                                if let Ok(y) = literal.parse::<f64>() {
                                    let mut x = y;
                                    let mut decreasing = false;
                                    for step in lin.numeric.iter().rev() {
                                        x = step.inverse(x);
                                        decreasing ^= step.decreasing();
                                    }
                                    let op = if decreasing { flip_comparator(&c[2]) } else { &c[2] };
                                    let sig = significant_digits(literal).max(3);
                                    out.push_str(&c[1]);
                                    out.push_str(op);
                                    out.push_str(&c[3]);
                                    out.push_str(&format_significant(x, sig));
                                    consumed += c[0].len();
                                }
                            }
                        }
                    }
                }
                pos += consumed;
                prev = text[..pos].chars().next_back();
                matched = true;
                break;
            }
        }
        if !matched {
            let c = rest.chars().next().unwrap();
            out.push(c);
            pos += c.len_utf8();
            prev = Some(c);
        }
    }
    if !notes.is_empty() {
        out.push_str("\n\n");
        out.push_str(&notes.join("\n"));
    }
    out
}
