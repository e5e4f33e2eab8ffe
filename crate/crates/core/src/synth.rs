//! Two-feature Gaussian datasets with a linear class boundary and an exact
//! number of flipped labels.
//!
//! Generation is fully determined by `seed`. Three independent ChaCha8
//! streams are derived from it: stream 0 draws the features, stream 1 the
//! boundary angle, stream 2 the rows whose labels get flipped. Normal
//! variates use the Box-Muller transform on 53-bit uniforms, so output is
//! identical on every platform.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Cell, ColumnSchema, DataError, Dataset, Row, RowId};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn default_features() -> [String; 2] {
    ["x1".into(), "x2".into()]
}

fn default_labels() -> [String; 2] {
    ["1".into(), "0".into()]
}

fn default_target() -> String {
    "label".into()
}

fn default_decimals() -> Option<u32> {
    Some(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub name: String,
    pub n: usize,
    /// Fraction of rows whose label is flipped after the boundary is applied.
    #[serde(default)]
    pub noise_pct: f64,
    pub mean1: f64,
    pub std1: f64,
    pub mean2: f64,
    pub std2: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_features")]
    pub feature_names: [String; 2],
    /// `[positive, negative]`.
    #[serde(default = "default_labels")]
    pub label_names: [String; 2],
    #[serde(default = "default_target")]
    pub target_name: String,
    /// Features are rounded to this many decimals before labelling.
    #[serde(default = "default_decimals")]
    pub decimals: Option<u32>,
}

impl SynthConfig {
    pub fn new(name: &str, n: usize, noise_pct: f64, means: (f64, f64), stds: (f64, f64), seed: u64) -> Self {
        SynthConfig {
            name: name.into(),
            n,
            noise_pct,
            mean1: means.0,
            std1: stds.0,
            mean2: means.1,
            std2: stds.1,
            seed,
            feature_names: default_features(),
            label_names: default_labels(),
            target_name: default_target(),
            decimals: default_decimals(),
        }
    }

    /// The three published synthetic configurations.
    pub fn espionage(seed: u64) -> Self {
        Self::new("espionage", 200, 0.0, (70.0, 30.0), (10.0, 8.0), seed)
    }

    pub fn timetravel_insurance(seed: u64) -> Self {
        Self::new("timetravel_insurance", 200, 0.10, (12.0, 5.0), (3.0, 2.0), seed)
    }

    pub fn potions(seed: u64) -> Self {
        Self::new("potions", 200, 0.20, (40.0, 15.0), (12.0, 5.0), seed)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if !(self.std1 > 0.0 && self.std2 > 0.0) {
            return bad("standard deviations must be positive");
        }
        if self.n < 4 {
            return bad("need at least 4 rows");
        }
        if !(0.0..=1.0).contains(&self.noise_pct) {
            return bad("noise_pct must lie in [0, 1]");
        }
        if !(self.mean1.is_finite() && self.mean2.is_finite()) {
            return bad("means must be finite");
        }
        if self.label_names[0] == self.label_names[1] {
            return bad("label names must differ");
        }
        if self.feature_names[0] == self.feature_names[1] || self.feature_names.iter().any(|f| f.is_empty()) {
            return bad("feature names must be distinct and nonempty");
        }
        Ok(())
    }

    pub fn expected_flips(&self) -> usize {
        (self.noise_pct * self.n as f64).round() as usize
    }
}

/// Rows with `w . x > b` take the positive label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearBoundary {
    pub w: [f64; 2],
    pub b: f64,
}

impl LinearBoundary {
    pub fn project(&self, x: [f64; 2]) -> f64 {
        self.w[0] * x[0] + self.w[1] * x[1]
    }

    pub fn is_positive(&self, x: [f64; 2]) -> bool {
        self.project(x) > self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub boundary: LinearBoundary,
    pub flipped: Vec<RowId>,
}

fn uniform_open(rng: &mut ChaCha8Rng) -> f64 {
    // (0, 1]: never zero, so ln() is finite
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let r = (-2.0 * uniform_open(rng).ln()).sqrt();
    let theta = 2.0 * PI * uniform(rng);
    (r * theta.cos(), r * theta.sin())
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn round_to(x: f64, decimals: Option<u32>) -> f64 {
    match decimals {
        Some(d) => {
            let scale = 10f64.powi(d as i32);
            (x * scale).round() / scale
        }
        None => x,
    }
}

/// Unit normal whose angle is drawn from the seed's boundary stream.
pub fn boundary_direction(seed: u64) -> [f64; 2] {
    let angle = 2.0 * PI * uniform(&mut stream(seed, 1));
    [angle.cos(), angle.sin()]
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Boundary for a set of points: the seed's direction, offset at the median
/// projection so the classes split as evenly as possible.
pub fn fit_boundary(seed: u64, points: &[[f64; 2]]) -> LinearBoundary {
    let w = boundary_direction(seed);
    let mut proj: Vec<f64> = points.iter().map(|p| w[0] * p[0] + w[1] * p[1]).collect();
    LinearBoundary { w, b: median(&mut proj) }
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticData, SynthError> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, 0);
    let points: Vec<[f64; 2]> = (0..cfg.n)
        .map(|_| {
            let (z1, z2) = box_muller(&mut rng);
            [
                round_to(cfg.mean1 + cfg.std1 * z1, cfg.decimals),
                round_to(cfg.mean2 + cfg.std2 * z2, cfg.decimals),
            ]
        })
        .collect();
    let boundary = fit_boundary(cfg.seed, &points);

    let mut flip = vec![false; cfg.n];
    let mut flip_rng = stream(cfg.seed, 2);
    for i in sample(&mut flip_rng, cfg.n, cfg.expected_flips()) {
        flip[i] = true;
    }

    let [pos, neg] = &cfg.label_names;
    let [f1, f2] = &cfg.feature_names;
    let mut rows = Vec::with_capacity(cfg.n);
    let mut flipped = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let clean = boundary.is_positive(*p);
        let positive = clean != flip[i];
        let id = RowId::from(i);
        if flip[i] {
            flipped.push(id.clone());
        }
        let mut values = BTreeMap::new();
        values.insert(f1.clone(), Cell::Number(p[0]));
        values.insert(f2.clone(), Cell::Number(p[1]));
        rows.push(Row { id, values, label: if positive { pos.clone() } else { neg.clone() } });
    }
    let schema = vec![ColumnSchema::numeric(f1), ColumnSchema::numeric(f2)];
    let dataset = Dataset::new(&cfg.name, schema, &cfg.target_name, rows, pos, neg)?;
    Ok(SyntheticData { dataset, boundary, flipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub n: usize,
    pub means: [f64; 2],
    pub stds: [f64; 2],
    pub mean_tolerance: [f64; 2],
    pub std_tolerance: [f64; 2],
    pub mean_ok: [bool; 2],
    pub std_ok: [bool; 2],
    pub flips: usize,
    pub expected_flips: usize,
    pub flips_ok: bool,
    pub passed: bool,
}

/// Generator self-check. Means must fall within three standard errors,
/// sample standard deviations within three standard errors of the sample
/// std (`sigma / sqrt(2(n-1))`), and the number of rows disagreeing with
/// the seed's boundary must equal the configured flip count.
pub fn verify_stats(ds: &Dataset, cfg: &SynthConfig) -> SynthReport {
    let [f1, f2] = &cfg.feature_names;
    let points: Vec<[f64; 2]> = ds
        .rows
        .iter()
        .map(|r| [r.get(f1).as_number().unwrap_or(f64::NAN), r.get(f2).as_number().unwrap_or(f64::NAN)])
        .collect();
    let n = points.len();
    let nf = n as f64;
    let mut means = [0.0; 2];
    let mut stds = [0.0; 2];
    for j in 0..2 {
        means[j] = points.iter().map(|p| p[j]).sum::<f64>() / nf;
        let ss: f64 = points.iter().map(|p| (p[j] - means[j]).powi(2)).sum();
        stds[j] = if n > 1 { (ss / (nf - 1.0)).sqrt() } else { 0.0 };
    }
    let sigma = [cfg.std1, cfg.std2];
    let mu = [cfg.mean1, cfg.mean2];
    let mean_tolerance = [3.0 * sigma[0] / nf.sqrt(), 3.0 * sigma[1] / nf.sqrt()];
    let denom = (2.0 * (nf - 1.0)).max(1.0).sqrt();
    let std_tolerance = [3.0 * sigma[0] / denom, 3.0 * sigma[1] / denom];
    let mean_ok = [0, 1].map(|j| (means[j] - mu[j]).abs() <= mean_tolerance[j]);
    let std_ok = [0, 1].map(|j| (stds[j] - sigma[j]).abs() <= std_tolerance[j]);

    let boundary = fit_boundary(cfg.seed, &points);
    let positive = &cfg.label_names[0];
    let flips = ds
        .rows
        .iter()
        .zip(&points)
        .filter(|(r, p)| boundary.is_positive(**p) != (&r.label == positive))
        .count();
    let expected_flips = cfg.expected_flips();
    let flips_ok = flips == expected_flips && n == cfg.n;
    let passed = mean_ok.iter().chain(&std_ok).all(|b| *b) && flips_ok;
    SynthReport { n, means, stds, mean_tolerance, std_tolerance, mean_ok, std_ok, flips, expected_flips, flips_ok, passed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_csv_dataset, Cell};

    #[test]
    fn espionage_matches_its_configuration() {
        let cfg = SynthConfig::espionage(7);
        let data = generate(&cfg).unwrap();
        assert_eq!(data.dataset.rows.len(), 200);
        let report = verify_stats(&data.dataset, &cfg);
        assert!(report.passed, "{report:?}");
        assert!((report.mean_tolerance[0] - 2.1213).abs() < 1e-3);
        assert_eq!(report.flips, 0);
        // noiseless data is separated by the stored boundary
        for row in &data.dataset.rows {
            let x = [row.get("x1").as_number().unwrap(), row.get("x2").as_number().unwrap()];
            assert_eq!(data.boundary.is_positive(x), row.label == "1");
        }
    }

    #[test]
    fn classes_balanced_before_noise() {
        for seed in 0..20 {
            for n in [4, 5, 51, 200] {
                let cfg = SynthConfig::new("b", n, 0.0, (0.0, 0.0), (1.0, 1.0), seed);
                let ds = generate(&cfg).unwrap().dataset;
                let pos = ds.rows.iter().filter(|r| r.label == "1").count() as i64;
                let neg = n as i64 - pos;
                assert!((pos - neg).abs() <= 1, "seed {seed} n {n}: {pos} vs {neg}");
            }
        }
    }

    #[test]
    fn noise_flips_exact_count() {
        let cfg = SynthConfig::potions(3);
        let data = generate(&cfg).unwrap();
        assert_eq!(data.flipped.len(), 40);
        let report = verify_stats(&data.dataset, &cfg);
        assert_eq!(report.flips, 40);
        assert!(report.flips_ok);

        let tt = SynthConfig::timetravel_insurance(3);
        assert_eq!(generate(&tt).unwrap().flipped.len(), 20);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig::timetravel_insurance(11);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_csv_dataset(&generate(&cfg).unwrap().dataset, &mut a).unwrap();
        write_csv_dataset(&generate(&cfg).unwrap().dataset, &mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        write_csv_dataset(&generate(&SynthConfig::timetravel_insurance(12)).unwrap().dataset, &mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn verify_fails_on_constant_feature_and_wrong_flips() {
        let cfg = SynthConfig::espionage(1);
        let mut ds = generate(&cfg).unwrap().dataset;
        let mut broken = ds.clone();
        for r in &mut broken.rows {
            r.values.insert("x2".into(), Cell::Number(30.0));
        }
        let report = verify_stats(&broken, &cfg);
        assert!(!report.std_ok[1]);
        assert!(!report.passed);

        let first = ds.rows[0].label.clone();
        ds.rows[0].label = if first == "1" { "0".into() } else { "1".into() };
        let report = verify_stats(&ds, &cfg);
        assert_eq!(report.flips, 1);
        assert!(!report.flips_ok && !report.passed);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SynthConfig::espionage(0);
        cfg.std1 = 0.0;
        assert!(generate(&cfg).is_err());
        let mut cfg = SynthConfig::espionage(0);
        cfg.n = 3;
        assert!(generate(&cfg).is_err());
        let mut cfg = SynthConfig::espionage(0);
        cfg.noise_pct = 1.5;
        assert!(generate(&cfg).is_err());
    }
}
