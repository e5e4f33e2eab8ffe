//! Tabular data model: schemas, rows, datasets, stratified splitting and
//! the plain-text row rendering shown to underling models.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("invalid row {id}: {reason}")]
    Row { id: String, reason: String },
    #[error("dataset has no rows")]
    Empty,
    #[error("target column `{0}` not found")]
    UnknownTarget(String),
    #[error("target must be binary, found labels {0:?}")]
    NotBinary(Vec<String>),
    #[error("column `{0}` mixes numeric and non-numeric values; declare its kind in a schema file")]
    MixedColumn(String),
    #[error("duplicate row id `{0}`")]
    DuplicateId(String),
    #[error("cannot split: {0}")]
    Sizing(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

impl ColumnSchema {
    pub fn numeric(name: impl Into<String>) -> Self {
        ColumnSchema { name: name.into(), kind: ColumnKind::Numeric, categories: None }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, categories: impl IntoIterator<Item = S>) -> Self {
        ColumnSchema {
            name: name.into(),
            kind: ColumnKind::Categorical,
            categories: Some(categories.into_iter().map(Into::into).collect()),
        }
    }

    pub fn text(name: impl Into<String>) -> Self {
        ColumnSchema { name: name.into(), kind: ColumnKind::Text, categories: None }
    }
}

/// Stable row identifier. Taken from an id column when present, otherwise
/// the 0-based position in the source file.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RowId(pub String);

impl RowId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RowId {
    fn from(s: &str) -> Self {
        RowId(s.to_string())
    }
}

impl From<String> for RowId {
    fn from(s: String) -> Self {
        RowId(s)
    }
}

impl From<usize> for RowId {
    fn from(i: usize) -> Self {
        RowId(i.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Number(f64),
    Text(String),
    Missing,
}

impl Cell {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Cell::Number(x) => Some(*x),
            _ => None,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    /// Printed form used in prompts and CSV output. Missing cells have none.
    pub fn display_value(&self) -> Option<String> {
        match self {
            Cell::Number(x) => Some(format_number(*x)),
            Cell::Text(s) => Some(s.clone()),
            Cell::Missing => None,
        }
    }
}

/// Shortest round-tripping decimal form; integral values print without a
/// fractional part.
pub fn format_number(x: f64) -> String {
    if x == 0.0 {
        // avoid "-0"
        return "0".to_string();
    }
    format!("{x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub id: RowId,
    pub values: BTreeMap<String, Cell>,
    pub label: String,
}

impl Row {
    pub fn get(&self, column: &str) -> &Cell {
        self.values.get(column).unwrap_or(&Cell::Missing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub schema: Vec<ColumnSchema>,
    pub target_name: String,
    pub rows: Vec<Row>,
    pub positive_label: String,
    pub negative_label: String,
}

impl Dataset {
    /// Builds a dataset and checks every invariant of the data model.
    pub fn new(
        name: impl Into<String>,
        schema: Vec<ColumnSchema>,
        target_name: impl Into<String>,
        rows: Vec<Row>,
        positive_label: impl Into<String>,
        negative_label: impl Into<String>,
    ) -> Result<Self, DataError> {
        let ds = Dataset {
            name: name.into(),
            schema,
            target_name: target_name.into(),
            rows,
            positive_label: positive_label.into(),
            negative_label: negative_label.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut names = HashSet::new();
        for col in &self.schema {
            if col.name.is_empty() {
                return Err(DataError::Schema("empty column name".into()));
            }
            if !names.insert(col.name.as_str()) {
                return Err(DataError::Schema(format!("duplicate column `{}`", col.name)));
            }
            if col.kind == ColumnKind::Categorical && col.categories.as_ref().is_none_or(|c| c.is_empty()) {
                return Err(DataError::Schema(format!("categorical column `{}` lists no categories", col.name)));
            }
        }
        if self.target_name.is_empty() || names.contains(self.target_name.as_str()) {
            return Err(DataError::Schema(format!(
                "target `{}` must be nonempty and not a feature column",
                self.target_name
            )));
        }
        if self.positive_label == self.negative_label {
            return Err(DataError::NotBinary(vec![self.positive_label.clone()]));
        }
        if self.rows.is_empty() {
            return Err(DataError::Empty);
        }
        let mut ids = HashSet::new();
        for row in &self.rows {
            if !ids.insert(&row.id) {
                return Err(DataError::DuplicateId(row.id.0.clone()));
            }
            let bad = |reason: String| DataError::Row { id: row.id.0.clone(), reason };
            if row.label != self.positive_label && row.label != self.negative_label {
                return Err(bad(format!("label `{}` is not one of the two target labels", row.label)));
            }
            if row.values.len() != self.schema.len() {
                return Err(bad(format!("has {} values for {} columns", row.values.len(), self.schema.len())));
            }
            for col in &self.schema {
                let Some(cell) = row.values.get(&col.name) else {
                    return Err(bad(format!("no value for column `{}`", col.name)));
                };
                match (col.kind, cell) {
                    (_, Cell::Missing) => {}
                    (ColumnKind::Numeric, Cell::Number(x)) if x.is_finite() => {}
                    (ColumnKind::Numeric, _) => {
                        return Err(bad(format!("column `{}` needs a finite number", col.name)));
                    }
                    (ColumnKind::Categorical, Cell::Text(s)) => {
                        let cats = col.categories.as_deref().unwrap_or_default();
                        if !cats.iter().any(|c| c == s) {
                            return Err(bad(format!("`{s}` is not a category of `{}`", col.name)));
                        }
                    }
                    (ColumnKind::Text, Cell::Text(_)) => {}
                    (_, Cell::Number(_)) => {
                        return Err(bad(format!("column `{}` does not hold numbers", col.name)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSchema> {
        self.schema.iter().find(|c| c.name == name)
    }

    pub fn row(&self, id: &RowId) -> Option<&Row> {
        self.rows.iter().find(|r| &r.id == id)
    }

    pub fn index(&self) -> BTreeMap<&RowId, &Row> {
        self.rows.iter().map(|r| (&r.id, r)).collect()
    }

    /// Rows whose id is in `ids`, in dataset order.
    pub fn rows_in<'a>(&'a self, ids: &'a BTreeSet<RowId>) -> impl Iterator<Item = &'a Row> + 'a {
        self.rows.iter().filter(move |r| ids.contains(&r.id))
    }

    pub fn truth(&self) -> BTreeMap<RowId, String> {
        self.rows.iter().map(|r| (r.id.clone(), r.label.clone())).collect()
    }

    pub fn labels(&self) -> [&str; 2] {
        [&self.positive_label, &self.negative_label]
    }

    pub fn other_label(&self, label: &str) -> &str {
        if label == self.positive_label {
            &self.negative_label
        } else {
            &self.positive_label
        }
    }
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.6, validation: 0.2, test: 0.2 }
    }
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Self {
        SplitRatios { train, validation, test }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: BTreeSet<RowId>,
    pub validation: BTreeSet<RowId>,
    pub test: BTreeSet<RowId>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl SplitAssignment {
    pub fn ids(&self, split: Split) -> &BTreeSet<RowId> {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, id: &RowId) -> Option<Split> {
        [Split::Train, Split::Validation, Split::Test].into_iter().find(|s| self.ids(*s).contains(id))
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that the assignment partitions exactly the rows of `ds`.
    pub fn check_against(&self, ds: &Dataset) -> Result<(), DataError> {
        let all: BTreeSet<&RowId> = ds.rows.iter().map(|r| &r.id).collect();
        let mut seen = BTreeSet::new();
        for split in [Split::Train, Split::Validation, Split::Test] {
            let ids = self.ids(split);
            if ids.is_empty() {
                return Err(DataError::Sizing(format!("{split:?} split is empty")));
            }
            for id in ids {
                if !all.contains(id) {
                    return Err(DataError::Sizing(format!("row `{id}` is not in the dataset")));
                }
                if !seen.insert(id) {
                    return Err(DataError::Sizing(format!("row `{id}` is assigned twice")));
                }
            }
        }
        if seen.len() != all.len() {
            return Err(DataError::Sizing("split does not cover every row".into()));
        }
        Ok(())
    }
}

/// Largest-remainder allocation of `n` items over `ratios`; each share is
/// within one item of `ratio * n`.
fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut remaining = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

/// Stratified, seeded train/validation/test split.
pub fn split_dataset(ds: &Dataset, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment, DataError> {
    let r = ratios.as_array();
    if r.iter().any(|x| !x.is_finite() || *x <= 0.0) {
        return Err(DataError::Sizing(format!("ratios must all be positive, got {r:?}")));
    }
    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Sizing(format!("ratios must sum to 1, got {r:?}")));
    }
    let mut out = SplitAssignment {
        train: BTreeSet::new(),
        validation: BTreeSet::new(),
        test: BTreeSet::new(),
        seed,
    };
    for (stratum, label) in ds.labels().iter().enumerate() {
        let mut ids: Vec<&RowId> = ds.rows.iter().filter(|row| row.label == *label).map(|row| &row.id).collect();
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stratum as u64);
        ids.shuffle(&mut rng);
        let [n_train, n_val, _] = allocate(ids.len(), r);
        for (i, id) in ids.into_iter().enumerate() {
            let target = if i < n_train {
                &mut out.train
            } else if i < n_train + n_val {
                &mut out.validation
            } else {
                &mut out.test
            };
            target.insert(id.clone());
        }
    }
    for split in [Split::Train, Split::Validation, Split::Test] {
        if out.ids(split).is_empty() {
            return Err(DataError::Sizing(format!(
                "{} rows are too few for a nonempty {split:?} split at ratios {r:?}",
                ds.rows.len()
            )));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// One `Name: value` line per schema column, in schema order. The target is
/// never included; missing cells read `unknown`.
pub fn render_row(row: &Row, schema: &[ColumnSchema]) -> String {
    let mut lines = Vec::with_capacity(schema.len());
    for col in schema {
        let value = match row.get(&col.name).display_value() {
            Some(v) => v.replace('\r', "").replace('\n', "\\n"),
            None => "unknown".to_string(),
        };
        lines.push(format!("{}: {}", col.name, value));
    }
    lines.join("\n")
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
}

/// Optional JSON sidecar describing column kinds and the target.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemaSidecar {
    #[serde(default)]
    pub columns: Vec<ColumnSchema>,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub positive_label: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Dataset name; defaults to the file stem.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub target: Option<String>,
    /// Column holding row ids. When unset a column literally named `id` is used if present.
    #[serde(default)]
    pub id_column: Option<String>,
    #[serde(default)]
    pub positive_label: Option<String>,
    #[serde(default)]
    pub schema: Option<SchemaSidecar>,
}

fn is_missing_token(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("null")
}

fn parse_finite(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|x| x.is_finite())
}

pub fn load_dataset(path: &Path, format: DataFormat, opts: &LoadOptions) -> Result<Dataset, DataError> {
    match format {
        DataFormat::Csv => {
            let file = std::fs::File::open(path)?;
            let name = opts
                .name
                .clone()
                .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .unwrap_or_else(|| "dataset".into());
            read_csv_dataset(file, &name, opts)
        }
    }
}

pub fn read_csv_dataset<R: std::io::Read>(reader: R, name: &str, opts: &LoadOptions) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        records.push(rec.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    }
    let sidecar = opts.schema.clone().unwrap_or_default();
    let target = opts
        .target
        .clone()
        .or(sidecar.target.clone())
        .ok_or_else(|| DataError::UnknownTarget("<unspecified>".into()))?;
    let target_idx = headers
        .iter()
        .position(|h| *h == target)
        .ok_or_else(|| DataError::UnknownTarget(target.clone()))?;
    let id_idx = match &opts.id_column {
        Some(col) => Some(
            headers
                .iter()
                .position(|h| h == col)
                .ok_or_else(|| DataError::Schema(format!("id column `{col}` not found")))?,
        ),
        None => headers.iter().position(|h| h == "id"),
    };
    if records.is_empty() {
        return Err(DataError::Empty);
    }

    let mut labels: Vec<String> = Vec::new();
    for rec in &records {
        let l = rec[target_idx].trim().to_string();
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    labels.sort();
    if labels.len() != 2 {
        return Err(DataError::NotBinary(labels));
    }
    let positive = match opts.positive_label.clone().or(sidecar.positive_label.clone()) {
        Some(p) if labels.contains(&p) => p,
        Some(p) => return Err(DataError::Schema(format!("positive label `{p}` does not occur in the target"))),
        None => default_positive(&labels),
    };
    let negative = labels.iter().find(|l| **l != positive).cloned().unwrap_or_default();

    let feature_idx: Vec<usize> = (0..headers.len()).filter(|&i| i != target_idx && Some(i) != id_idx).collect();
    let mut schema = Vec::with_capacity(feature_idx.len());
    for &i in &feature_idx {
        let col_name = &headers[i];
        let declared = sidecar.columns.iter().find(|c| &c.name == col_name);
        let col = match declared {
            Some(c) => {
                let mut c = c.clone();
                if c.kind == ColumnKind::Categorical && c.categories.is_none() {
                    c.categories = Some(distinct_values(&records, i));
                }
                c
            }
            None => infer_column(col_name, &records, i)?,
        };
        schema.push(col);
    }

    let mut rows = Vec::with_capacity(records.len());
    for (pos, rec) in records.iter().enumerate() {
        let id = match id_idx {
            Some(i) => RowId(rec[i].trim().to_string()),
            None => RowId::from(pos),
        };
        let mut values = BTreeMap::new();
        for (col, &i) in schema.iter().zip(&feature_idx) {
            let raw = &rec[i];
            let cell = if is_missing_token(raw) {
                Cell::Missing
            } else {
                match col.kind {
                    ColumnKind::Numeric => match parse_finite(raw) {
                        Some(x) => Cell::Number(x),
                        None => {
                            return Err(DataError::Row {
                                id: id.0.clone(),
                                reason: format!("`{raw}` in numeric column `{}`", col.name),
                            })
                        }
                    },
                    _ => Cell::Text(raw.trim().to_string()),
                }
            };
            values.insert(col.name.clone(), cell);
        }
        rows.push(Row { id, values, label: rec[target_idx].trim().to_string() });
    }
    Dataset::new(name, schema, target, rows, positive, negative)
}

fn default_positive(sorted_labels: &[String]) -> String {
    let pairs = [("0", "1"), ("false", "true"), ("no", "yes"), ("n", "y")];
    for (neg, pos) in pairs {
        let lower: Vec<String> = sorted_labels.iter().map(|l| l.to_lowercase()).collect();
        if lower.contains(&neg.to_string()) && lower.contains(&pos.to_string()) {
            let i = lower.iter().position(|l| l == pos).unwrap();
            return sorted_labels[i].clone();
        }
    }
    sorted_labels[1].clone()
}

fn distinct_values(records: &[Vec<String>], i: usize) -> Vec<String> {
    let set: BTreeSet<String> =
        records.iter().map(|r| r[i].trim()).filter(|s| !is_missing_token(s)).map(str::to_string).collect();
    set.into_iter().collect()
}

fn infer_column(name: &str, records: &[Vec<String>], i: usize) -> Result<ColumnSchema, DataError> {
    let mut numeric = 0usize;
    let mut other = 0usize;
    for rec in records {
        let raw = &rec[i];
        if is_missing_token(raw) {
            continue;
        }
        if parse_finite(raw).is_some() {
            numeric += 1;
        } else {
            other += 1;
        }
    }
    match (numeric, other) {
        (_, 0) if numeric > 0 => Ok(ColumnSchema::numeric(name)),
        (0, _) if other > 0 => Ok(ColumnSchema::categorical(name, distinct_values(records, i))),
        (0, 0) => Ok(ColumnSchema::numeric(name)),
        _ => Err(DataError::MixedColumn(name.to_string())),
    }
}

/// Writes the dataset back out as CSV with an `id` column first and the
/// target last.
pub fn write_csv_dataset<W: std::io::Write>(ds: &Dataset, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string()];
    header.extend(ds.schema.iter().map(|c| c.name.clone()));
    header.push(ds.target_name.clone());
    w.write_record(&header)?;
    for row in &ds.rows {
        let mut rec = vec![row.id.0.clone()];
        for col in &ds.schema {
            rec.push(row.get(&col.name).display_value().unwrap_or_default());
        }
        rec.push(row.label.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Schema sidecar matching `ds`, so a written CSV reloads with the same kinds.
pub fn sidecar_for(ds: &Dataset) -> SchemaSidecar {
    SchemaSidecar {
        columns: ds.schema.clone(),
        target: Some(ds.target_name.clone()),
        positive_label: Some(ds.positive_label.clone()),
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::labelled;
    use super::*;
    use proptest::prelude::*;

    fn row(values: &[(&str, Cell)]) -> Row {
        Row {
            id: RowId::from("r"),
            values: values.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            label: "1".into(),
        }
    }

    #[test]
    fn split_sizes_and_stratification_for_ten_rows() {
        let ds = labelled(5, 5);
        let s = split_dataset(&ds, SplitRatios::new(0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (6, 2, 2));
        let idx = ds.index();
        for split in [Split::Train, Split::Validation, Split::Test] {
            let labels: BTreeSet<&str> = s.ids(split).iter().map(|id| idx[id].label.as_str()).collect();
            assert_eq!(labels.len(), 2, "{split:?} should hold both labels");
        }
        s.check_against(&ds).unwrap();
    }

    #[test]
    fn split_rejects_empty_share() {
        let ds = labelled(5, 5);
        assert!(matches!(split_dataset(&ds, SplitRatios::new(1.0, 0.0, 0.0), 1), Err(DataError::Sizing(_))));
        assert!(matches!(split_dataset(&labelled(1, 1), SplitRatios::default(), 1), Err(DataError::Sizing(_))));
    }

    #[test]
    fn split_is_deterministic() {
        let ds = labelled(30, 20);
        let a = split_dataset(&ds, SplitRatios::default(), 9).unwrap();
        let b = split_dataset(&ds, SplitRatios::default(), 9).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&ds, SplitRatios::default(), 10).unwrap();
        assert_ne!(a.train, c.train);
    }

    proptest! {
        #[test]
        fn split_partitions_and_stratifies(n_pos in 3usize..60, n_neg in 3usize..60, seed in any::<u64>(),
                                          tr in 0.2f64..0.7, va in 0.1f64..0.4) {
            let te = 1.0 - tr - va;
            prop_assume!(te > 0.05);
            let ds = labelled(n_pos, n_neg);
            let ratios = SplitRatios::new(tr, va, te);
            match split_dataset(&ds, ratios, seed) {
                Err(DataError::Sizing(_)) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
                Ok(s) => {
                    s.check_against(&ds).unwrap();
                    let idx = ds.index();
                    for (label, count) in [("1", n_pos), ("0", n_neg)] {
                        for (split, ratio) in [(Split::Train, tr), (Split::Validation, va), (Split::Test, te)] {
                            let got = s.ids(split).iter().filter(|id| idx[*id].label == label).count() as f64;
                            prop_assert!((got - ratio * count as f64).abs() <= 1.0 + 1e-9);
                        }
                    }
                }
            }
        }

        #[test]
        fn render_is_injective_on_distinct_values(a in "[a-z0-9]{1,6}", b in "[a-z0-9]{1,6}", x in -1e6f64..1e6, y in -1e6f64..1e6) {
            let schema = vec![ColumnSchema::text("A"), ColumnSchema::numeric("B")];
            let r1 = row(&[("A", Cell::Text(a.clone())), ("B", Cell::Number(x))]);
            let r2 = row(&[("A", Cell::Text(b.clone())), ("B", Cell::Number(y))]);
            let distinct = a != b || format_number(x) != format_number(y);
            prop_assert_eq!(render_row(&r1, &schema) != render_row(&r2, &schema), distinct);
            prop_assert_eq!(render_row(&r1, &schema).lines().count(), 2);
        }
    }

    #[test]
    fn render_formats() {
        let schema = vec![ColumnSchema::numeric("A"), ColumnSchema::text("B")];
        let r = row(&[("A", Cell::Number(1.5)), ("B", Cell::Text("x".into()))]);
        assert_eq!(render_row(&r, &schema), "A: 1.5\nB: x");
        let r = row(&[("A", Cell::Missing), ("B", Cell::Text("line\nbreak".into()))]);
        assert_eq!(render_row(&r, &schema), "A: unknown\nB: line\\nbreak");
        let only_a = vec![ColumnSchema::numeric("A")];
        assert_eq!(render_row(&row(&[("A", Cell::Missing)]), &only_a), "A: unknown");
    }

    #[test]
    fn csv_inference_and_errors() {
        let opts = LoadOptions { target: Some("label".into()), ..Default::default() };
        let ds = read_csv_dataset("id,Age,label\na,22,1\nb,,0\nc,30.5,1\n".as_bytes(), "t", &opts).unwrap();
        assert_eq!(ds.schema, vec![ColumnSchema::numeric("Age")]);
        assert_eq!(ds.rows.len(), 3);
        assert_eq!(ds.rows[1].id.as_str(), "b");
        assert!(ds.rows[1].get("Age").is_missing());
        assert_eq!(ds.positive_label, "1");

        let err = read_csv_dataset("id,x,label\n1,1,yes\n2,2,no\n3,3,maybe\n".as_bytes(), "t", &opts).unwrap_err();
        assert!(matches!(err, DataError::NotBinary(_)));

        let err = read_csv_dataset("id,x,label\n1,1,yes\n2,b,no\n".as_bytes(), "t", &opts).unwrap_err();
        assert!(matches!(err, DataError::MixedColumn(c) if c == "x"));

        let err = read_csv_dataset("id,x,label\n1,1,yes\n1,2,no\n".as_bytes(), "t", &opts).unwrap_err();
        assert!(matches!(err, DataError::DuplicateId(_)));

        let bad_target = LoadOptions { target: Some("nope".into()), ..Default::default() };
        let err = read_csv_dataset("id,x,label\n1,1,yes\n2,2,no\n".as_bytes(), "t", &bad_target).unwrap_err();
        assert!(matches!(err, DataError::UnknownTarget(_)));
    }

    #[test]
    fn csv_without_id_column_uses_file_order_and_sidecar_overrides() {
        let sidecar = SchemaSidecar {
            columns: vec![ColumnSchema::text("Ticket")],
            target: Some("Survived".into()),
            positive_label: None,
        };
        let opts = LoadOptions { schema: Some(sidecar), ..Default::default() };
        let csv = "Ticket,Sex,Survived\nA/5 21171,male,0\n347082,female,1\n";
        let ds = read_csv_dataset(csv.as_bytes(), "t", &opts).unwrap();
        assert_eq!(ds.rows[0].id.as_str(), "0");
        assert_eq!(ds.rows[1].id.as_str(), "1");
        assert_eq!(ds.column("Ticket").unwrap().kind, ColumnKind::Text);
        assert_eq!(ds.column("Sex").unwrap(), &ColumnSchema::categorical("Sex", ["female", "male"]));
    }

    #[test]
    fn csv_write_then_read_is_identity() {
        let opts = LoadOptions { target: Some("label".into()), ..Default::default() };
        let ds = read_csv_dataset("id,Age,C,label\na,22,x,1\nb,,\"y, z\",0\n".as_bytes(), "t", &opts).unwrap();
        let mut buf = Vec::new();
        write_csv_dataset(&ds, &mut buf).unwrap();
        let opts = LoadOptions { schema: Some(sidecar_for(&ds)), ..Default::default() };
        let back = read_csv_dataset(buf.as_slice(), "t", &opts).unwrap();
        assert_eq!(back, ds);
    }
}
