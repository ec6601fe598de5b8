//! Scoring functions for estimation and evaluation.
//!
//! - [`pinball_loss`]: the quantile loss eliciting VaR (Koenker and Bassett, 1978).
//! - [`barrera_loss`]: squared-error score for the ES-VaR residual given a
//!   quantile path (Barrera et al., 2022).
//! - [`patton_loss`]: the joint (VaR, ES) score with a log barrier in ES
//!   (Patton, Ziegel and Chen, 2019); requires ê_t < 0 everywhere.
//! - [`penalized_r_loss`] / [`penalized_joint_loss`]: the above plus soft
//!   constraints for monotonicity (ê ≤ q̂) and quantile non-positivity.
//!
//! Base losses are means over time; the penalty terms are sums over time,
//! matching how the soft constraints are scaled everywhere in this crate
//! (runtime default λ = 10/T keeps the pressure sample-size independent).
//!
//! Domain violations of the Patton barrier surface as errors rather than
//! being clamped: callers optimizing these losses are expected to map the
//! error to an infinite objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::ProbabilityLevel;

/// A scalar score, optionally with its per-time addends
/// (`value == mean(per_time)` whenever `per_time` is present).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_time: Option<Vec<f64>>,
}

fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::input(format!(
            "{name}: length mismatch ({got} vs {want})"
        )));
    }
    Ok(())
}

#[inline]
fn positive_part(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

#[inline]
fn pinball_term(q: f64, y: f64, theta: f64) -> f64 {
    let indicator = if y < q { 1.0 } else { 0.0 };
    (y - q) * (theta - indicator)
}

/// Mean pinball loss of a quantile path, allocation-free.
pub fn pinball_mean(q: &[f64], y: &[f64], theta: ProbabilityLevel) -> Result<f64> {
    check_len("pinball", q.len(), y.len())?;
    if q.is_empty() {
        return Err(Error::input("pinball: empty paths"));
    }
    let th = theta.get();
    let sum: f64 = q.iter().zip(y).map(|(&q, &y)| pinball_term(q, y, th)).sum();
    Ok(sum / q.len() as f64)
}

/// Pinball loss with per-time addends.
pub fn pinball_loss(q: &[f64], y: &[f64], theta: ProbabilityLevel) -> Result<LossValue> {
    check_len("pinball", q.len(), y.len())?;
    if q.is_empty() {
        return Err(Error::input("pinball: empty paths"));
    }
    let th = theta.get();
    let per_time: Vec<f64> = q
        .iter()
        .zip(y)
        .map(|(&q, &y)| pinball_term(q, y, th))
        .collect();
    let value = per_time.iter().sum::<f64>() / per_time.len() as f64;
    Ok(LossValue {
        value,
        per_time: Some(per_time),
    })
}

#[inline]
fn barrera_term(r: f64, q: f64, y: f64, inv_theta: f64) -> f64 {
    let excess = positive_part(q - y) * inv_theta;
    let d = r + excess;
    d * d
}

/// Mean Barrera loss of a residual path r̂ = ê - q̂ given a quantile path.
pub fn barrera_mean(r: &[f64], y: &[f64], q: &[f64], theta: ProbabilityLevel) -> Result<f64> {
    check_len("barrera", r.len(), y.len())?;
    check_len("barrera", q.len(), y.len())?;
    if r.is_empty() {
        return Err(Error::input("barrera: empty paths"));
    }
    let inv_theta = 1.0 / theta.get();
    let sum: f64 = r
        .iter()
        .zip(y)
        .zip(q)
        .map(|((&r, &y), &q)| barrera_term(r, q, y, inv_theta))
        .sum();
    Ok(sum / r.len() as f64)
}

/// Barrera loss with per-time addends.
pub fn barrera_loss(
    r: &[f64],
    y: &[f64],
    q: &[f64],
    theta: ProbabilityLevel,
) -> Result<LossValue> {
    check_len("barrera", r.len(), y.len())?;
    check_len("barrera", q.len(), y.len())?;
    if r.is_empty() {
        return Err(Error::input("barrera: empty paths"));
    }
    let inv_theta = 1.0 / theta.get();
    let per_time: Vec<f64> = r
        .iter()
        .zip(y)
        .zip(q)
        .map(|((&r, &y), &q)| barrera_term(r, q, y, inv_theta))
        .collect();
    let value = per_time.iter().sum::<f64>() / per_time.len() as f64;
    Ok(LossValue {
        value,
        per_time: Some(per_time),
    })
}

#[inline]
fn patton_term(e: f64, q: f64, y: f64, theta: f64) -> f64 {
    let indicator = if y <= q { 1.0 } else { 0.0 };
    q / e - (q - y) * indicator / (theta * e) + (-e).ln()
}

fn patton_domain_check(e: &[f64]) -> Result<()> {
    if let Some((t, v)) = e.iter().enumerate().find(|(_, v)| !(**v < 0.0)) {
        return Err(Error::domain(format!(
            "patton: ES path must be strictly negative, e[{t}] = {v}"
        )));
    }
    Ok(())
}

/// Mean Patton joint loss, allocation-free. Errors when any ê_t ≥ 0.
pub fn patton_mean(e: &[f64], q: &[f64], y: &[f64], theta: ProbabilityLevel) -> Result<f64> {
    check_len("patton", e.len(), y.len())?;
    check_len("patton", q.len(), y.len())?;
    if e.is_empty() {
        return Err(Error::input("patton: empty paths"));
    }
    patton_domain_check(e)?;
    let th = theta.get();
    let sum: f64 = e
        .iter()
        .zip(q)
        .zip(y)
        .map(|((&e, &q), &y)| patton_term(e, q, y, th))
        .sum();
    Ok(sum / e.len() as f64)
}

/// Patton joint loss with per-time addends. Errors when any ê_t ≥ 0.
pub fn patton_loss(
    e: &[f64],
    q: &[f64],
    y: &[f64],
    theta: ProbabilityLevel,
) -> Result<LossValue> {
    check_len("patton", e.len(), y.len())?;
    check_len("patton", q.len(), y.len())?;
    if e.is_empty() {
        return Err(Error::input("patton: empty paths"));
    }
    patton_domain_check(e)?;
    let th = theta.get();
    let per_time: Vec<f64> = e
        .iter()
        .zip(q)
        .zip(y)
        .map(|((&e, &q), &y)| patton_term(e, q, y, th))
        .collect();
    let value = per_time.iter().sum::<f64>() / per_time.len() as f64;
    Ok(LossValue {
        value,
        per_time: None,
    }
    .with_per_time(per_time))
}

impl LossValue {
    fn with_per_time(mut self, per_time: Vec<f64>) -> Self {
        self.per_time = Some(per_time);
        self
    }
}

/// Barrera loss plus the soft monotonicity penalty λ_r Σ_t (r̂_t)⁺.
///
/// The penalty is a sum over time, not a mean.
pub fn penalized_r_loss(
    r: &[f64],
    y: &[f64],
    q: &[f64],
    theta: ProbabilityLevel,
    lambda_r: f64,
) -> Result<LossValue> {
    if !(lambda_r >= 0.0) {
        return Err(Error::input(format!("lambda_r must be >= 0, got {lambda_r}")));
    }
    let base = barrera_mean(r, y, q, theta)?;
    let penalty: f64 = r.iter().map(|&r| positive_part(r)).sum();
    Ok(LossValue {
        value: base + lambda_r * penalty,
        per_time: None,
    })
}

/// Patton loss plus soft constraints λ_e Σ_t (ê_t - q̂_t)⁺ + λ_q Σ_t (q̂_t)⁺.
///
/// The penalties are sums over time, not means.
pub fn penalized_joint_loss(
    e: &[f64],
    q: &[f64],
    y: &[f64],
    theta: ProbabilityLevel,
    lambda_e: f64,
    lambda_q: f64,
) -> Result<LossValue> {
    if !(lambda_e >= 0.0) || !(lambda_q >= 0.0) {
        return Err(Error::input(format!(
            "penalty weights must be >= 0, got lambda_e={lambda_e} lambda_q={lambda_q}"
        )));
    }
    let base = patton_mean(e, q, y, theta)?;
    let mono: f64 = e
        .iter()
        .zip(q)
        .map(|(&e, &q)| positive_part(e - q))
        .sum();
    let pos: f64 = q.iter().map(|&q| positive_part(q)).sum();
    Ok(LossValue {
        value: base + lambda_e * mono + lambda_q * pos,
        per_time: None,
    })
}
