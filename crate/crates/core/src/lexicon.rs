//! Herdan's law, `V(n) = k * n^beta`, as a lexical-diversity measure for
//! narratives and overseer reasoning.

use std::collections::HashSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{ols, ols_trend, Inference, StatsError, TrendResult};

#[derive(Debug, Error, PartialEq)]
pub enum LexiconError {
    #[error("need at least 2 tokens to fit, got {0}")]
    TooShort(usize),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Below this many tokens a fit is reported but flagged.
pub const MIN_CONFIDENT_TOKENS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HerdanFit {
    pub k: f64,
    pub beta: f64,
    pub n_tokens: usize,
    pub v_types: usize,
    pub fit_points: usize,
    pub low_confidence: bool,
    /// beta fell outside the [0, 1.05] range expected for natural text.
    pub unusual_beta: bool,
}

/// Lowercased maximal runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Least-squares fit of `ln V(i)` on `ln i` over every prefix `i = 1..n`.
pub fn herdan_fit<S: AsRef<str>>(tokens: &[S]) -> Result<HerdanFit, LexiconError> {
    let n = tokens.len();
    if n < 2 {
        return Err(LexiconError::TooShort(n));
    }
    let mut seen = HashSet::new();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for (i, tok) in tokens.iter().enumerate() {
        seen.insert(tok.as_ref());
        xs.push(((i + 1) as f64).ln());
        ys.push((seen.len() as f64).ln());
    }
    let fit = ols(&xs, &ys, Inference::StudentT)?;
    let beta = fit.slope_per_year;
    Ok(HerdanFit {
        k: fit.intercept.exp(),
        beta,
        n_tokens: n,
        v_types: seen.len(),
        fit_points: n,
        low_confidence: n < MIN_CONFIDENT_TOKENS,
        unusual_beta: !(0.0..=1.05).contains(&beta),
    })
}

pub fn herdan_text(text: &str) -> Result<HerdanFit, LexiconError> {
    herdan_fit(&tokenize(text))
}

/// Trend of beta over calendar time; read the slope with
/// [`TrendResult::slope_per_day`].
pub fn herdan_trend(points: &[(DateTime<Utc>, f64)]) -> Result<TrendResult, LexiconError> {
    if points.len() < 3 {
        return Err(StatsError::TooFewPoints { needed: 3, got: points.len() }.into());
    }
    Ok(ols_trend(points)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HerdanPoint {
    pub date: DateTime<Utc>,
    pub series: String,
    pub beta: f64,
    pub k: f64,
    pub n_tokens: usize,
}

/// Fits every `(date, series, text)` item, skipping texts too short to fit.
pub fn herdan_series(items: &[(DateTime<Utc>, String, String)]) -> Vec<HerdanPoint> {
    items
        .iter()
        .filter_map(|(date, series, text)| {
            let fit = herdan_text(text).ok()?;
            Some(HerdanPoint { date: *date, series: series.clone(), beta: fit.beta, k: fit.k, n_tokens: fit.n_tokens })
        })
        .collect()
}
