//! Domain types shared by every model: return series, probability levels,
//! forecast paths, rolling block folds, and the estimation configuration.
//!
//! Also hosts the small empirical estimators (prefix quantile / tail mean)
//! used to seed the filter recursions, plus CSV ingestion of `date,price`
//! or `date,return` files.

use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A probability level θ in the open interval (0, 1).
///
/// Typical risk-desk levels are θ ∈ {0.05, 0.025, 0.01}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ProbabilityLevel(f64);

impl ProbabilityLevel {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::input(format!(
                "probability level must lie in (0, 1), got {theta}"
            )));
        }
        Ok(ProbabilityLevel(theta))
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for ProbabilityLevel {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        ProbabilityLevel::new(v)
    }
}

impl From<ProbabilityLevel> for f64 {
    fn from(p: ProbabilityLevel) -> f64 {
        p.0
    }
}

/// How to turn a price series into returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReturnMode {
    /// ln(p_t / p_{t-1})
    Log,
    /// p_t / p_{t-1} - 1
    Pct,
}

/// A univariate return series, optionally timestamped.
///
/// Values must be finite and at least two observations long. The unit
/// convention (raw vs percentage returns) is the caller's: it must simply
/// be consistent within a run, and the harness echoes it in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSeries {
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dates: Option<Vec<NaiveDate>>,
}

impl ReturnSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::input("empty return series"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::input(format!("non-finite return value {v}")));
        }
        Ok(ReturnSeries {
            values,
            dates: None,
        })
    }

    pub fn with_dates(values: Vec<f64>, dates: Vec<NaiveDate>) -> Result<Self> {
        if dates.len() != values.len() {
            return Err(Error::input(format!(
                "dates ({}) and values ({}) length mismatch",
                dates.len(),
                values.len()
            )));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("dates must be strictly increasing"));
        }
        let mut s = ReturnSeries::new(values)?;
        s.dates = Some(dates);
        Ok(s)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dates(&self) -> Option<&[NaiveDate]> {
        self.dates.as_deref()
    }

    /// Subseries restricted to `range` (dates sliced along).
    pub fn slice(&self, range: Range<usize>) -> Result<ReturnSeries> {
        if range.end > self.len() || range.start >= range.end {
            return Err(Error::input(format!(
                "range {range:?} out of bounds for series of length {}",
                self.len()
            )));
        }
        Ok(ReturnSeries {
            values: self.values[range.clone()].to_vec(),
            dates: self.dates.as_ref().map(|d| d[range].to_vec()),
        })
    }
}

/// Returns from a positive price series.
///
/// `Log` gives ln(p_t/p_{t-1}); `Pct` gives p_t/p_{t-1} - 1. Output is one
/// shorter than the input.
pub fn returns_from_prices(prices: &[f64], mode: ReturnMode) -> Result<ReturnSeries> {
    if prices.len() < 2 {
        return Err(Error::input("need at least 2 prices"));
    }
    if let Some(p) = prices.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
        return Err(Error::domain(format!("non-positive price {p}")));
    }
    let values: Vec<f64> = prices
        .windows(2)
        .map(|w| match mode {
            ReturnMode::Log => (w[1] / w[0]).ln(),
            ReturnMode::Pct => w[1] / w[0] - 1.0,
        })
        .collect();
    ReturnSeries::new(values)
}

/// One train/test block: `test` immediately follows `train`, both contiguous.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Range<usize>,
    pub test: Range<usize>,
}

impl Fold {
    /// Full window covered by the fold.
    pub fn window(&self) -> Range<usize> {
        self.train.start..self.test.end
    }
}

/// Rolling block folds: fold k covers `[k*stride, k*stride + window)`,
/// the first `train_len` points are train, the remainder test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

pub fn make_block_folds(
    t: usize,
    window: usize,
    train_len: usize,
    stride: usize,
) -> Result<FoldPlan> {
    if window > t {
        return Err(Error::input(format!(
            "window {window} exceeds series length {t}"
        )));
    }
    if train_len == 0 || train_len >= window {
        return Err(Error::input(format!(
            "train_len {train_len} must satisfy 0 < train_len < window {window}"
        )));
    }
    if stride == 0 {
        return Err(Error::input("stride must be >= 1"));
    }
    let n_folds = (t - window) / stride + 1;
    let folds = (0..n_folds)
        .map(|k| {
            let start = k * stride;
            Fold {
                train: start..start + train_len,
                test: start + train_len..start + window,
            }
        })
        .collect();
    Ok(FoldPlan { folds })
}

/// Empirical θ-quantile and tail mean of a sample prefix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalTail {
    /// Lower order statistic at index ⌈θn⌉ (clamped to [1, n]).
    pub q0: f64,
    /// Mean of the values ≤ q0; falls back to the sample minimum.
    pub e0: f64,
    /// Set when the tail mean had to fall back to the minimum.
    pub min_fallback: bool,
}

/// Empirical (VaR, ES) seed from a prefix of observations.
///
/// Quantile convention: lower order statistic, 1-based index ⌈θn⌉ clamped
/// to [1, n]. The tail mean averages all values ≤ q0, so e0 ≤ q0.
pub fn empirical_var_es(prefix: &[f64], theta: ProbabilityLevel) -> Result<EmpiricalTail> {
    if prefix.is_empty() {
        return Err(Error::input("empty prefix"));
    }
    let mut sorted = prefix.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    let idx = ((theta.get() * n as f64).ceil() as usize).clamp(1, n);
    let q0 = sorted[idx - 1];
    let tail: Vec<f64> = sorted.iter().copied().filter(|v| *v <= q0).collect();
    let (e0, min_fallback) = if tail.is_empty() {
        (sorted[0], true)
    } else {
        (tail.iter().sum::<f64>() / tail.len() as f64, false)
    };
    Ok(EmpiricalTail {
        q0,
        e0,
        min_fallback,
    })
}

/// Which objective drives the final CAESar step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossVariant {
    /// Barrera residual fit first, then joint refinement (the default).
    #[default]
    Both,
    /// Stop after the residual fit (B-CAESar).
    BarreraOnly,
    /// Single joint multistart fit (P-CAESar).
    PattonOnly,
}

/// Shared knobs for every model fit.
///
/// Penalty weights left at `None` resolve to 10/T at fit time, where T is
/// the training length, so the penalty pressure is independent of sample
/// size (the penalty terms are sums over t, not means).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationConfig {
    /// Number of random starting points drawn per multistart fit.
    pub n_starts: usize,
    /// How many ranked candidates are refined by chained local runs.
    pub n_keep: usize,
    /// Length of each sequential local-optimization chain.
    pub n_chained: usize,
    pub lambda_r: Option<f64>,
    pub lambda_q: Option<f64>,
    pub lambda_e: Option<f64>,
    /// Fraction of the training segment used for the empirical (q0, e0) seed.
    pub prefix_fraction: f64,
    pub seed: u64,
    /// Iteration cap per local optimization run.
    pub max_iter: usize,
    /// Objective-improvement stopping tolerance of a local run.
    pub tol: f64,
    pub loss_variant: LossVariant,
    /// Pin the cross coefficients (VaR on lagged ES, ES on lagged VaR) to zero.
    pub no_cross: bool,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            n_starts: 100,
            n_keep: 3,
            n_chained: 6,
            lambda_r: None,
            lambda_q: None,
            lambda_e: None,
            prefix_fraction: 0.10,
            seed: 0,
            max_iter: 300,
            tol: 1e-9,
            loss_variant: LossVariant::Both,
            no_cross: false,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_starts == 0 || self.n_keep == 0 || self.n_keep > self.n_starts {
            return Err(Error::input(format!(
                "need 1 <= n_keep <= n_starts, got n_keep={} n_starts={}",
                self.n_keep, self.n_starts
            )));
        }
        if self.n_chained == 0 {
            return Err(Error::input("n_chained must be >= 1"));
        }
        for (name, l) in [
            ("lambda_r", self.lambda_r),
            ("lambda_q", self.lambda_q),
            ("lambda_e", self.lambda_e),
        ] {
            if let Some(l) = l {
                if !(l >= 0.0) {
                    return Err(Error::input(format!("{name} must be >= 0, got {l}")));
                }
            }
        }
        if !(self.prefix_fraction > 0.0 && self.prefix_fraction <= 1.0) {
            return Err(Error::input(format!(
                "prefix_fraction must lie in (0, 1], got {}",
                self.prefix_fraction
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::input("tol must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::input("max_iter must be >= 1"));
        }
        Ok(())
    }

    /// Penalty weight resolved against a training length.
    pub fn resolve_lambda(lambda: Option<f64>, train_len: usize) -> f64 {
        lambda.unwrap_or(10.0 / train_len.max(1) as f64)
    }

    /// Length of the empirical seed prefix for a training segment.
    pub fn prefix_len(&self, train_len: usize) -> usize {
        ((self.prefix_fraction * train_len as f64).ceil() as usize).clamp(1, train_len)
    }
}

/// Paired per-time VaR and ES forecasts at a probability level.
///
/// Accepted fits should satisfy e_t ≤ q_t ≤ 0; filters do not enforce this,
/// they count breaches so callers can report them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastPath {
    pub q: Vec<f64>,
    pub e: Vec<f64>,
    pub theta: ProbabilityLevel,
}

impl ForecastPath {
    pub fn new(q: Vec<f64>, e: Vec<f64>, theta: ProbabilityLevel) -> Result<Self> {
        if q.len() != e.len() {
            return Err(Error::input(format!(
                "VaR path ({}) and ES path ({}) length mismatch",
                q.len(),
                e.len()
            )));
        }
        Ok(ForecastPath { q, e, theta })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.q.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Times where the ES forecast sits above the VaR forecast (ê_t > q̂_t).
    pub fn crossing_count(&self) -> usize {
        self.q
            .iter()
            .zip(&self.e)
            .filter(|(q, e)| *e > *q)
            .count()
    }

    /// Times violating the full feasibility chain ê_t ≤ q̂_t ≤ 0.
    pub fn constraint_violations(&self) -> usize {
        self.q
            .iter()
            .zip(&self.e)
            .filter(|(q, e)| *e > *q || **q > 0.0)
            .count()
    }

    pub fn slice(&self, range: Range<usize>) -> Result<ForecastPath> {
        if range.end > self.len() || range.start >= range.end {
            return Err(Error::input(format!(
                "range {range:?} out of bounds for path of length {}",
                self.len()
            )));
        }
        Ok(ForecastPath {
            q: self.q[range.clone()].to_vec(),
            e: self.e[range].to_vec(),
            theta: self.theta,
        })
    }
}

/// Reads a two-column `date,price` or `date,return` CSV (comma, header,
/// UTF-8). The second header name decides the interpretation; prices are
/// converted with `mode`. Dates in `%Y-%m-%d` become timestamps; any other
/// format is tolerated but dropped.
pub fn read_series_csv(path: impl AsRef<Path>, mode: ReturnMode) -> Result<ReturnSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::input(
            "expected a two-column CSV with a date and a price/return column",
        ));
    }
    let second = headers.get(1).unwrap_or("").trim().to_ascii_lowercase();
    let is_price = second.contains("price");
    let is_return = second.contains("ret");
    if !is_price && !is_return {
        return Err(Error::input(format!(
            "second column must be named like `price` or `return`, got `{second}`"
        )));
    }

    let mut raw_dates: Vec<String> = Vec::new();
    let mut col: Vec<f64> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let date = rec.get(0).unwrap_or("").trim().to_string();
        let val: f64 = rec
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| Error::input(format!("row {}: bad number ({e})", col.len() + 2)))?;
        raw_dates.push(date);
        col.push(val);
    }

    let (values, date_strings): (Vec<f64>, Vec<String>) = if is_price {
        let r = returns_from_prices(&col, mode)?;
        (r.values().to_vec(), raw_dates.split_off(1))
    } else {
        (col, raw_dates)
    };

    let parsed: Option<Vec<NaiveDate>> = date_strings
        .iter()
        .map(|d| NaiveDate::parse_from_str(d, "%Y-%m-%d").ok())
        .collect();
    match parsed {
        Some(dates) => ReturnSeries::with_dates(values, dates),
        None => ReturnSeries::new(values),
    }
}
