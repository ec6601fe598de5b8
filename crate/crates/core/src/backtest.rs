//! Backtests for ES forecasts.
//!
//! Direct approximation tests (bootstrap p-values, 10,000 resamples by
//! default):
//!
//! - [`mnf_test`]: McNeil-Frey one-sided test of no risk underestimation on
//!   the violation residuals y_t - ê_t.
//! - [`acerbi_szekely_test`]: Z1 = mean of y_t/ê_t over violations and
//!   Z2 = (1/T) Σ y_t/(ê_t θ), both two-sided around 1.
//!
//! Model-comparison tests:
//!
//! - [`dm_test`]: Diebold-Mariano with the Harvey small-sample adjustment.
//! - [`nadeau_bengio_test`]: corrected resampled t over cross-validation
//!   folds, variance rescaled by (1/J + n_test/n_train).
//! - [`loss_difference_test`]: one-sided bootstrap on the per-time loss
//!   difference (rejection: A outperforms B).
//! - [`encompassing_test`]: non-negative least-squares combination of two
//!   forecasters on the first half of the test window, then a loss
//!   difference run of A against the combination on the second half.
//!
//! Bootstrap construction: the sample is shifted so the statistic sits
//! exactly at its null value, resampled `n_boot` times with replacement,
//! and the p-value is the fraction of resampled statistics at least as
//! extreme as the observed one. All tests are deterministic given the seed.
//! Violations use the strict set {t : y_t < q̂_t}.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses;
use crate::series::{ForecastPath, ProbabilityLevel};

/// Default bootstrap sample count.
pub const DEFAULT_N_BOOT: u32 = 10_000;

/// Outcome of one backtest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub name: String,
    pub statistic: f64,
    pub p_value: f64,
    /// 0 for analytic tests.
    pub n_boot: u32,
    pub reject_at_5pct: bool,
    pub diagnostics: BTreeMap<String, serde_json::Value>,
}

impl TestReport {
    fn new(name: &str, statistic: f64, p_value: f64, n_boot: u32) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        TestReport {
            name: name.to_string(),
            statistic,
            p_value,
            n_boot,
            reject_at_5pct: p_value < 0.05,
            diagnostics: BTreeMap::new(),
        }
    }

    fn with_flag(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.diagnostics.insert(key.to_string(), value.into());
        self
    }

    fn degenerate(name: &str, reason: &str) -> Self {
        TestReport::new(name, 0.0, 1.0, 0).with_flag("degenerate", reason)
    }

    pub fn is_degenerate(&self) -> bool {
        self.diagnostics.contains_key("degenerate")
    }

    pub fn is_inconclusive(&self) -> bool {
        self.diagnostics.contains_key("inconclusive")
    }
}

/// Strict violation set {t : y_t < q̂_t}.
pub fn violation_set(y: &[f64], q: &[f64]) -> Vec<usize> {
    y.iter()
        .zip(q)
        .enumerate()
        .filter(|(_, (y, q))| y < q)
        .map(|(t, _)| t)
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// One-sided bootstrap p-value for H0: E[x] >= 0. The sample is recentred
/// to mean zero; p is the fraction of resampled means <= the observed mean.
fn bootstrap_p_mean_geq_zero(x: &[f64], n_boot: u32, seed: u64) -> f64 {
    let obs = mean(x);
    let centered: Vec<f64> = x.iter().map(|v| v - obs).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = centered.len();
    let mut count = 0u32;
    for _ in 0..n_boot {
        let mut s = 0.0;
        for _ in 0..n {
            s += centered[rng.gen_range(0..n)];
        }
        if s / n as f64 <= obs {
            count += 1;
        }
    }
    count as f64 / n_boot as f64
}

/// Two-sided bootstrap p-value for H0: E[x] = null. The sample is shifted
/// so its mean equals the null; p is the fraction of resampled means at
/// least as far from the null as the observed mean.
fn bootstrap_p_mean_two_sided(x: &[f64], null: f64, n_boot: u32, seed: u64) -> f64 {
    let obs = mean(x);
    let shift = obs - null;
    let centered: Vec<f64> = x.iter().map(|v| v - shift).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = centered.len();
    let target = (obs - null).abs();
    let mut count = 0u32;
    for _ in 0..n_boot {
        let mut s = 0.0;
        for _ in 0..n {
            s += centered[rng.gen_range(0..n)];
        }
        if (s / n as f64 - null).abs() >= target {
            count += 1;
        }
    }
    count as f64 / n_boot as f64
}

fn check_paths(name: &str, y: &[f64], q: &[f64], e: &[f64]) -> Result<()> {
    if y.len() != q.len() || y.len() != e.len() {
        return Err(Error::input(format!(
            "{name}: y ({}), q ({}), e ({}) must share a length",
            y.len(),
            q.len(),
            e.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::input(format!("{name}: empty inputs")));
    }
    Ok(())
}

/// McNeil-Frey: one-sided bootstrap test of H0 "no risk underestimation",
/// i.e. the violation residuals y_t - ê_t have non-negative mean. Fewer
/// than 5 violations yields an inconclusive report (p = 1 when empty).
pub fn mnf_test(y: &[f64], q: &[f64], e: &[f64], n_boot: u32, seed: u64) -> Result<TestReport> {
    check_paths("mnf", y, q, e)?;
    let viol = violation_set(y, q);
    if viol.is_empty() {
        return Ok(TestReport::new("MNF", 0.0, 1.0, 0)
            .with_flag("inconclusive", "no violations")
            .with_flag("n_violations", 0));
    }
    let x: Vec<f64> = viol.iter().map(|&t| y[t] - e[t]).collect();
    let p = bootstrap_p_mean_geq_zero(&x, n_boot, seed);
    let mut report =
        TestReport::new("MNF", mean(&x), p, n_boot).with_flag("n_violations", viol.len());
    if viol.len() < 5 {
        // The reject flag stays consistent with the p-value; the flag tells
        // consumers the sample was too thin to trust either way.
        report = report.with_flag("inconclusive", "fewer than 5 violations");
    }
    Ok(report)
}

/// Which Acerbi-Szekely statistic to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZVariant {
    Z1,
    Z2,
}

/// Acerbi-Szekely Z tests, two-sided around the null value 1.
///
/// Z1 averages y_t/ê_t over the violation set; Z2 averages
/// y_t/(ê_t θ)·1{violation} over the whole sample. Any ê_t = 0 entering a
/// statistic is a domain error; zero violations make Z1 inconclusive and
/// drive Z2 to 0 (a strong rejection for large T).
pub fn acerbi_szekely_test(
    y: &[f64],
    q: &[f64],
    e: &[f64],
    variant: ZVariant,
    theta: ProbabilityLevel,
    n_boot: u32,
    seed: u64,
) -> Result<TestReport> {
    check_paths("acerbi_szekely", y, q, e)?;
    let viol = violation_set(y, q);
    let name = match variant {
        ZVariant::Z1 => "AS-Z1",
        ZVariant::Z2 => "AS-Z2",
    };
    let contributions: Vec<f64> = match variant {
        ZVariant::Z1 => {
            if viol.is_empty() {
                return Ok(TestReport::new(name, f64::NAN, 1.0, 0)
                    .with_flag("inconclusive", "no violations")
                    .with_flag("n_violations", 0));
            }
            for &t in &viol {
                if e[t] == 0.0 {
                    return Err(Error::domain(format!("Z1: zero ES at t={t}")));
                }
            }
            viol.iter().map(|&t| y[t] / e[t]).collect()
        }
        ZVariant::Z2 => {
            let th = theta.get();
            y.iter()
                .zip(q)
                .zip(e)
                .map(|((&yt, &qt), &et)| {
                    if yt < qt {
                        if et == 0.0 {
                            return Err(Error::domain("Z2: zero ES on a violation"));
                        }
                        Ok(yt / (et * th))
                    } else {
                        Ok(0.0)
                    }
                })
                .collect::<Result<_>>()?
        }
    };
    let statistic = mean(&contributions);
    let p = bootstrap_p_mean_two_sided(&contributions, 1.0, n_boot, seed);
    Ok(TestReport::new(name, statistic, p, n_boot).with_flag("n_violations", viol.len()))
}

/// Diebold-Mariano with the Harvey small-sample adjustment; two-sided
/// Student-t p-value with T-1 degrees of freedom. `h` is the forecast
/// horizon: the long-run variance sums autocovariances up to lag h-1.
pub fn dm_test(loss_a: &[f64], loss_b: &[f64], h: usize) -> Result<TestReport> {
    if loss_a.len() != loss_b.len() {
        return Err(Error::input("dm: loss streams must share a length"));
    }
    let t_len = loss_a.len();
    if t_len < 10 {
        return Err(Error::input("dm: need at least 10 observations"));
    }
    if h == 0 || h > t_len {
        return Err(Error::input(format!("dm: horizon {h} out of range")));
    }
    let d: Vec<f64> = loss_a.iter().zip(loss_b).map(|(a, b)| a - b).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Ok(TestReport::degenerate("DM", "identical loss streams"));
    }
    let d_bar = mean(&d);
    let tf = t_len as f64;
    let mut v = autocovariance(&d, d_bar, 0);
    for k in 1..h {
        v += 2.0 * autocovariance(&d, d_bar, k);
    }
    if v <= 0.0 {
        return Ok(TestReport::degenerate("DM", "non-positive long-run variance"));
    }
    let dm = d_bar / (v / tf).sqrt();
    let hf = h as f64;
    let harvey = ((tf + 1.0 - 2.0 * hf + hf * (hf - 1.0) / tf) / tf).sqrt();
    let stat = harvey * dm;
    let p = student_t_two_sided(stat, tf - 1.0)?;
    Ok(TestReport::new("DM", stat, p, 0).with_flag("horizon", h as i64))
}

fn autocovariance(d: &[f64], d_bar: f64, k: usize) -> f64 {
    let t = d.len();
    (k..t).map(|i| (d[i] - d_bar) * (d[i - k] - d_bar)).sum::<f64>() / t as f64
}

fn student_t_two_sided(stat: f64, dof: f64) -> Result<f64> {
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::input(e.to_string()))?;
    Ok((2.0 * (1.0 - dist.cdf(stat.abs()))).clamp(0.0, 1.0))
}

/// Corrected resampled t-test over per-fold mean losses (Nadeau-Bengio).
/// The fold-difference variance is rescaled by (1/J + n_test/n_train);
/// two-sided Student-t p-value with J-1 degrees of freedom.
pub fn nadeau_bengio_test(
    fold_loss_a: &[f64],
    fold_loss_b: &[f64],
    n_train: usize,
    n_test: usize,
) -> Result<TestReport> {
    if fold_loss_a.len() != fold_loss_b.len() {
        return Err(Error::input("nadeau_bengio: fold losses must share a length"));
    }
    let j = fold_loss_a.len();
    if j < 2 {
        return Err(Error::input("nadeau_bengio: need at least 2 folds"));
    }
    if n_train == 0 || n_test == 0 {
        return Err(Error::input("nadeau_bengio: fold sizes must be positive"));
    }
    let d: Vec<f64> = fold_loss_a
        .iter()
        .zip(fold_loss_b)
        .map(|(a, b)| a - b)
        .collect();
    let d_bar = mean(&d);
    let jf = j as f64;
    let s2 = d.iter().map(|v| (v - d_bar) * (v - d_bar)).sum::<f64>() / (jf - 1.0);
    if s2 == 0.0 {
        return Ok(TestReport::degenerate("NB", "zero fold-difference variance"));
    }
    let correction = 1.0 / jf + n_test as f64 / n_train as f64;
    let stat = d_bar / (correction * s2).sqrt();
    let p = student_t_two_sided(stat, jf - 1.0)?;
    Ok(TestReport::new("NB", stat, p, 0)
        .with_flag("n_folds", j as i64)
        .with_flag("correction", correction))
}

/// One-sided bootstrap on the per-time loss difference, H0: mean >= 0.
/// Rejection means A outperforms B.
pub fn loss_difference_test(
    loss_a: &[f64],
    loss_b: &[f64],
    n_boot: u32,
    seed: u64,
) -> Result<TestReport> {
    if loss_a.len() != loss_b.len() {
        return Err(Error::input("loss_difference: loss streams must share a length"));
    }
    if loss_a.is_empty() {
        return Err(Error::input("loss_difference: empty inputs"));
    }
    let d: Vec<f64> = loss_a.iter().zip(loss_b).map(|(a, b)| a - b).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Ok(TestReport::degenerate("LD", "identical loss streams"));
    }
    let p = bootstrap_p_mean_geq_zero(&d, n_boot, seed);
    Ok(TestReport::new("LD", mean(&d), p, n_boot))
}

/// Non-negative least squares of `target ~ a*x1 + b*x2` over two columns,
/// solved by comparing the unconstrained solution with the boundary fits.
fn nnls2(x1: &[f64], x2: &[f64], target: &[f64]) -> (f64, f64) {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (s11, s22, s12) = (dot(x1, x1), dot(x2, x2), dot(x1, x2));
    let (t1, t2) = (dot(x1, target), dot(x2, target));
    let det = s11 * s22 - s12 * s12;
    let mut candidates: Vec<(f64, f64)> = Vec::with_capacity(4);
    if det.abs() > 1e-12 * s11.max(s22).max(1.0) {
        let a = (t1 * s22 - t2 * s12) / det;
        let b = (t2 * s11 - t1 * s12) / det;
        if a >= 0.0 && b >= 0.0 {
            candidates.push((a, b));
        }
    }
    if s11 > 0.0 {
        candidates.push(((t1 / s11).max(0.0), 0.0));
    }
    if s22 > 0.0 {
        candidates.push((0.0, (t2 / s22).max(0.0)));
    }
    candidates.push((0.0, 0.0));
    let sse = |&(a, b): &(f64, f64)| {
        target
            .iter()
            .zip(x1)
            .zip(x2)
            .map(|((t, v1), v2)| {
                let r = t - a * v1 - b * v2;
                r * r
            })
            .sum::<f64>()
    };
    candidates
        .into_iter()
        .min_by(|p, q| sse(p).partial_cmp(&sse(q)).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap()
}

/// Encompassing test of forecaster A against B.
///
/// The first half of the window fits non-negative least-squares weights
/// combining A and B into C, regressing the realized tail proxy
/// z_t = y_t·1{y_t ≤ q̄_t}/θ (whose conditional mean is the ES when the
/// anchor quantile q̄ = (q̂_A + q̂_B)/2 is calibrated) on the two ES paths;
/// the VaR weights use the same proxy rescaled to quantile scale by the
/// anchors' mean VaR/ES ratio. The second half runs a loss-difference test
/// of A against C on the per-time Barrera losses. Rejection means B adds
/// only noise, so A outperforms B. A ≡ B is degenerate.
pub fn encompassing_test(
    path_a: &ForecastPath,
    path_b: &ForecastPath,
    y: &[f64],
    theta: ProbabilityLevel,
    n_boot: u32,
    seed: u64,
) -> Result<TestReport> {
    let t_len = y.len();
    if path_a.len() != t_len || path_b.len() != t_len {
        return Err(Error::input("encompassing: paths must match the series"));
    }
    if t_len < 20 {
        return Err(Error::input("encompassing: need at least 20 observations"));
    }
    let scale = path_a
        .e
        .iter()
        .chain(&path_b.e)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let identical = path_a
        .e
        .iter()
        .zip(&path_b.e)
        .all(|(a, b)| (a - b).abs() < 1e-12 * scale)
        && path_a
            .q
            .iter()
            .zip(&path_b.q)
            .all(|(a, b)| (a - b).abs() < 1e-12 * scale);
    if identical {
        return Ok(TestReport::degenerate("ENC", "collinear forecasters"));
    }

    let half = t_len / 2;
    let th = theta.get();
    let anchor_q: Vec<f64> = (0..half)
        .map(|t| 0.5 * (path_a.q[t] + path_b.q[t]))
        .collect();
    let proxy: Vec<f64> = (0..half)
        .map(|t| if y[t] <= anchor_q[t] { y[t] / th } else { 0.0 })
        .collect();
    let (alpha_e, beta_e) = nnls2(&path_a.e[..half], &path_b.e[..half], &proxy);

    let anchor_e_sum: f64 = (0..half).map(|t| 0.5 * (path_a.e[t] + path_b.e[t])).sum();
    let ratio = if anchor_e_sum == 0.0 {
        1.0
    } else {
        anchor_q.iter().sum::<f64>() / anchor_e_sum
    };
    let proxy_q: Vec<f64> = proxy.iter().map(|z| z * ratio).collect();
    let (alpha_q, beta_q) = nnls2(&path_a.q[..half], &path_b.q[..half], &proxy_q);

    let second = half..t_len;
    let q_c: Vec<f64> = second
        .clone()
        .map(|t| alpha_q * path_a.q[t] + beta_q * path_b.q[t])
        .collect();
    let e_c: Vec<f64> = second
        .clone()
        .map(|t| alpha_e * path_a.e[t] + beta_e * path_b.e[t])
        .collect();
    let y2 = &y[half..];
    let r_a: Vec<f64> = second
        .clone()
        .map(|t| path_a.e[t] - path_a.q[t])
        .collect();
    let q_a: Vec<f64> = second.clone().map(|t| path_a.q[t]).collect();
    let r_c: Vec<f64> = e_c.iter().zip(&q_c).map(|(e, q)| e - q).collect();
    let loss_a = losses::barrera_loss(&r_a, y2, &q_a, theta)?
        .per_time
        .expect("per-time populated");
    let loss_c = losses::barrera_loss(&r_c, y2, &q_c, theta)?
        .per_time
        .expect("per-time populated");
    let ld = loss_difference_test(&loss_a, &loss_c, n_boot, seed)?;
    Ok(TestReport::new("ENC", ld.statistic, ld.p_value, n_boot)
        .with_flag("alpha_e", alpha_e)
        .with_flag("beta_e", beta_e)
        .with_flag("alpha_q", alpha_q)
        .with_flag("beta_q", beta_q)
        .with_flag("loss", "barrera"))
}
