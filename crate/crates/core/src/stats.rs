//! Trend regression over calendar time, slope significance, multiple-test
//! correction, crossing-date extrapolation and the Wilcoxon signed-rank test.

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

/// Mean Gregorian year.
pub const DAYS_PER_YEAR: f64 = 365.2425;
pub const SECONDS_PER_YEAR: f64 = DAYS_PER_YEAR * 86_400.0;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("all dates are equal")]
    DegenerateDates,
    #[error("every difference is zero")]
    AllZeroDifferences,
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// How slope p-values are computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    #[default]
    StudentT,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendResult {
    pub slope_per_year: f64,
    /// Fitted value at the Unix epoch; `x` is measured in years since then.
    pub intercept: f64,
    /// `None` when the slope has no degrees of freedom left (two points).
    pub p_value: Option<f64>,
    pub n_points: usize,
    pub residual_variance: f64,
    pub slope_stderr: Option<f64>,
}

impl TrendResult {
    pub fn slope_per_day(&self) -> f64 {
        self.slope_per_year / DAYS_PER_YEAR
    }

    /// Improvement per year of a lower-is-better score.
    pub fn annual_improvement(&self) -> f64 {
        -self.slope_per_year
    }

    pub fn value_at(&self, t: DateTime<Utc>) -> f64 {
        self.intercept + self.slope_per_year * years_since_epoch(t)
    }
}

pub fn years_since_epoch(t: DateTime<Utc>) -> f64 {
    (t.timestamp() as f64 + t.timestamp_subsec_nanos() as f64 * 1e-9) / SECONDS_PER_YEAR
}

pub fn date_from_years(years: f64) -> Option<DateTime<Utc>> {
    let secs = years * SECONDS_PER_YEAR;
    if !secs.is_finite() || secs.abs() > 1e13 {
        return None;
    }
    let whole = secs.floor();
    let nanos = ((secs - whole) * 1e9).round().min(999_999_999.0) as u32;
    Utc.timestamp_opt(whole as i64, nanos).single()
}

/// Survival function of Student's t: `P(T > t)` with `df` degrees of freedom.
pub fn t_sf(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("df must be positive");
    // cdf(-t) keeps precision in the far upper tail.
    dist.cdf(-t)
}

pub fn normal_sf(z: f64) -> f64 {
    Normal::standard().cdf(-z)
}

pub fn bonferroni(p: f64, m: usize) -> Result<f64, StatsError> {
    if m == 0 {
        return Err(StatsError::Invalid("number of tests must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(StatsError::Invalid(format!("p-value {p} outside [0, 1]")));
    }
    Ok((p * m as f64).min(1.0))
}

/// Simple least squares on raw `(x, y)`.
pub fn ols(xs: &[f64], ys: &[f64], inference: Inference) -> Result<TrendResult, StatsError> {
    let n = xs.len();
    if n != ys.len() {
        return Err(StatsError::Invalid("x and y lengths differ".into()));
    }
    if n < 2 {
        return Err(StatsError::TooFewPoints { needed: 2, got: n });
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(StatsError::DegenerateDates);
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    if n == 2 {
        return Ok(TrendResult {
            slope_per_year: slope,
            intercept,
            p_value: None,
            n_points: n,
            residual_variance: 0.0,
            slope_stderr: None,
        });
    }
    let ssr: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let df = nf - 2.0;
    let residual_variance = ssr / df;
    let stderr = (residual_variance / sxx).sqrt();
    let p_value = if residual_variance < 1e-12 {
        // An exact fit: report 0, unless there is no slope at all.
        if slope == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        let t = (slope / stderr).abs();
        let p = match inference {
            Inference::StudentT => 2.0 * t_sf(t, df),
            Inference::Normal => 2.0 * normal_sf(t),
        };
        p.clamp(0.0, 1.0)
    };
    Ok(TrendResult {
        slope_per_year: slope,
        intercept,
        p_value: Some(p_value),
        n_points: n,
        residual_variance,
        slope_stderr: Some(stderr),
    })
}

/// Least-squares trend of `value` against date in fractional years.
pub fn ols_trend(points: &[(DateTime<Utc>, f64)]) -> Result<TrendResult, StatsError> {
    ols_trend_with(points, Inference::StudentT)
}

pub fn ols_trend_with(points: &[(DateTime<Utc>, f64)], inference: Inference) -> Result<TrendResult, StatsError> {
    let mut seen = std::collections::HashSet::new();
    for (t, _) in points {
        if !seen.insert(*t) {
            return Err(StatsError::Invalid(format!("duplicate date {}", t.to_rfc3339())));
        }
    }
    let xs: Vec<f64> = points.iter().map(|(t, _)| years_since_epoch(*t)).collect();
    let ys: Vec<f64> = points.iter().map(|(_, v)| *v).collect();
    ols(&xs, &ys, inference)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SotaPrediction {
    /// Already better than the baseline; `crossing` is when the fitted line
    /// passed it, if that lies at or before the reference date.
    Already { crossing: Option<DateTime<Utc>> },
    Never,
    At { date: DateTime<Utc> },
}

/// When a lower-is-better trend is expected to beat `baseline_best`.
pub fn predict_sota_date(
    trend: &TrendResult,
    t_ref: DateTime<Utc>,
    current_value: f64,
    baseline_best: f64,
) -> SotaPrediction {
    let slope = trend.slope_per_year;
    let crossing = if slope != 0.0 { date_from_years((baseline_best - trend.intercept) / slope) } else { None };
    if current_value < baseline_best {
        let crossing = crossing.filter(|c| slope < 0.0 && *c <= t_ref);
        return SotaPrediction::Already { crossing };
    }
    if slope >= 0.0 {
        return SotaPrediction::Never;
    }
    match crossing {
        Some(date) => SotaPrediction::At { date },
        None => SotaPrediction::Never,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub method: WilcoxonMethod,
}

/// Largest sample for which the exact null distribution is enumerated.
pub const EXACT_LIMIT: usize = 25;

/// Two-sided signed-rank test of `a - b`; exact up to [`EXACT_LIMIT`]
/// nonzero differences, normal approximation above.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult, StatsError> {
    wilcoxon_with(pairs, None)
}

pub fn wilcoxon_with(pairs: &[(f64, f64)], force: Option<WilcoxonMethod>) -> Result<WilcoxonResult, StatsError> {
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|d| d.abs() > 1e-12).collect();
    if diffs.is_empty() {
        return Err(StatsError::AllZeroDifferences);
    }
    let n = diffs.len();
    let (ranks, ties) = abs_midranks(&diffs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let method = force.unwrap_or(if n <= EXACT_LIMIT { WilcoxonMethod::Exact } else { WilcoxonMethod::NormalApprox });
    let p_value = match method {
        WilcoxonMethod::Exact => exact_p(&ranks, w_plus),
        WilcoxonMethod::NormalApprox => {
            let nf = n as f64;
            let mean = nf * (nf + 1.0) / 4.0;
            let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
            let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
            let dev = ((w_plus - mean).abs() - 0.5).max(0.0);
            (2.0 * normal_sf(dev / var.sqrt())).min(1.0)
        }
    };
    Ok(WilcoxonResult { w_plus, w_minus: total - w_plus, p_value, n_effective: n, method })
}

/// Midranks of `|d|` and the sizes of tied groups.
fn abs_midranks(diffs: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).unwrap());
    let mut ranks = vec![0.0; diffs.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let base = diffs[order[i]].abs();
        while j + 1 < order.len() && (diffs[order[j + 1]].abs() - base).abs() <= 1e-12 * base.max(1.0) {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// Exact two-sided p by counting sign assignments. Midranks are halves, so
/// the distribution is built over doubled ranks.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let total = 2f64.powi(ranks.len() as i32);
    let w = (w_plus * 2.0).round() as usize;
    let lower: f64 = counts[..=w].iter().sum::<f64>() / total;
    let upper: f64 = counts[w..].iter().sum::<f64>() / total;
    (2.0 * lower.min(upper)).min(1.0)
}
