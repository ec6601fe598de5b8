//! Conditional autoregressive Value-at-Risk (Engle and Manganelli, 2004).
//!
//! The quantile estimate is regressed on a transformation of lagged
//! observations and on its own lags:
//!
//! ```text
//! q_t = b0 + sum_{i=1..p} b_{(i-1)d+1..id} · f(y_{t-i}) + sum_{j=1..u} b_{pd+j} q_{t-j}
//! ```
//!
//! with the regressor map `f` chosen by the specification:
//!
//! - AS (asymmetric slope): f(y) = ((y)+, (y)-), d = 2
//! - SAV (symmetric absolute value): f(y) = |y|, d = 1
//! - IG (indirect GARCH): f(y) = y², d = 1, with the recursion run on the
//!   squared scale and the output mapped through -sqrt
//!
//! Alignment: the filter output `path[k]` is the one-step-ahead forecast
//! formed from observations up to and including `y[k]`, so `path[k]` is
//! scored against `y[k+1]` and the final element is the forecast for the
//! first unobserved step. Warm-up: missing lagged observations (lags
//! reaching before the sample) take the earliest available value `y[0]`;
//! missing lagged estimates take the initialization q0, which plays the
//! role of the forecast for the first observed step. Parameters are fitted
//! by minimizing in-sample pinball loss with the multistart engine.

use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::losses;
use crate::optimizer::{self, MultistartConfig};
use crate::series::{empirical_var_es, EstimationConfig, ProbabilityLevel, ReturnSeries};

/// Filter values beyond this magnitude poison the fit objective.
pub(crate) const DIVERGENCE_GUARD: f64 = 1e6;
/// Practical floor on training length for any fit.
pub(crate) const MIN_TRAIN: usize = 50;

/// Which regressor map the recursion uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaviarKind {
    #[serde(rename = "AS")]
    As,
    #[serde(rename = "SAV")]
    Sav,
    #[serde(rename = "IG")]
    Ig,
}

impl CaviarKind {
    /// Dimension d of the regressor map.
    pub fn regressor_dim(self) -> usize {
        match self {
            CaviarKind::As => 2,
            CaviarKind::Sav | CaviarKind::Ig => 1,
        }
    }
}

impl std::str::FromStr for CaviarKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AS" => Ok(CaviarKind::As),
            "SAV" => Ok(CaviarKind::Sav),
            "IG" | "GARCH" | "G" => Ok(CaviarKind::Ig),
            other => Err(Error::input(format!("unknown specification `{other}`"))),
        }
    }
}

/// Specification: regressor kind, observation lags `p`, estimate lags `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaviarSpec {
    pub kind: CaviarKind,
    pub p: usize,
    pub u: usize,
}

impl CaviarSpec {
    pub fn new(kind: CaviarKind, p: usize, u: usize) -> Result<Self> {
        if p == 0 || u == 0 {
            return Err(Error::input("lag orders p and u must be >= 1"));
        }
        Ok(CaviarSpec { kind, p, u })
    }

    /// AS-(1,1), the workhorse specification.
    pub fn as11() -> Self {
        CaviarSpec {
            kind: CaviarKind::As,
            p: 1,
            u: 1,
        }
    }

    #[inline]
    pub fn regressor_dim(&self) -> usize {
        self.kind.regressor_dim()
    }

    /// Parameter count of the quantile-only recursion: 1 + p·d + u.
    pub fn param_len(&self) -> usize {
        1 + self.p * self.regressor_dim() + self.u
    }

    /// Parameter count of one joint-recursion equation: 1 + p·d + 2u.
    pub fn joint_param_len(&self) -> usize {
        1 + self.p * self.regressor_dim() + 2 * self.u
    }

    /// Writes f(y) into `out` (length d). For IG the regressor is y²; the
    /// autoregressive state also lives on the squared scale there.
    #[inline]
    pub(crate) fn regressors(&self, y: f64, out: &mut [f64]) {
        match self.kind {
            CaviarKind::As => {
                out[0] = y.max(0.0);
                out[1] = (-y).max(0.0);
            }
            CaviarKind::Sav => out[0] = y.abs(),
            CaviarKind::Ig => out[0] = y * y,
        }
    }

    /// Lagged-state encoding: identity for AS/SAV, square for IG.
    #[inline]
    pub(crate) fn encode_state(&self, output: f64) -> f64 {
        match self.kind {
            CaviarKind::Ig => output * output,
            _ => output,
        }
    }

    /// State decoding: identity for AS/SAV, -sqrt for IG (negative radicand
    /// is a domain breach reported to the caller).
    #[inline]
    pub(crate) fn decode_state(&self, state: f64) -> Result<f64> {
        match self.kind {
            CaviarKind::Ig => {
                if state < 0.0 {
                    Err(Error::domain(format!(
                        "indirect-GARCH radicand is negative ({state})"
                    )))
                } else {
                    Ok(-state.sqrt())
                }
            }
            _ => Ok(state),
        }
    }
}

/// Coefficient vector of the quantile recursion (length 1 + p·d + u).
///
/// For IG the coefficients act on the squared scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaviarParams {
    pub beta: Vec<f64>,
}

impl CaviarParams {
    pub fn new(beta: Vec<f64>, spec: &CaviarSpec) -> Result<Self> {
        if beta.len() != spec.param_len() {
            return Err(Error::input(format!(
                "expected {} coefficients for {:?}-({},{}), got {}",
                spec.param_len(),
                spec.kind,
                spec.p,
                spec.u,
                beta.len()
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::input("non-finite coefficient"));
        }
        Ok(CaviarParams { beta })
    }
}

/// A fitted CAViaR model.
///
/// Serializes flat as `{kind, p, u, theta, beta, q0, ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaviarModel {
    pub kind: CaviarKind,
    pub p: usize,
    pub u: usize,
    pub theta: ProbabilityLevel,
    pub beta: Vec<f64>,
    pub q0: f64,
    /// Achieved in-sample pinball loss (absent on hand-built models).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_loss: Option<f64>,
    /// Set when the training series was constant and the fit degenerated to
    /// the empirical quantile.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl CaviarModel {
    pub fn spec(&self) -> CaviarSpec {
        CaviarSpec {
            kind: self.kind,
            p: self.p,
            u: self.u,
        }
    }

    pub fn params(&self) -> Result<CaviarParams> {
        CaviarParams::new(self.beta.clone(), &self.spec())
    }

    /// Runs the fitted recursion over a series.
    pub fn filter(&self, y: &[f64]) -> Result<Vec<f64>> {
        caviar_filter(&self.params()?, &self.spec(), y, self.q0)
    }
}

/// Runs the quantile recursion over `y`, producing one estimate per
/// observation. `q0` seeds the missing lagged estimates of the warm-up.
pub fn caviar_filter(
    params: &CaviarParams,
    spec: &CaviarSpec,
    y: &[f64],
    q0: f64,
) -> Result<Vec<f64>> {
    if !q0.is_finite() {
        return Err(Error::input("q0 must be finite"));
    }
    if y.is_empty() {
        return Err(Error::input("empty series"));
    }
    let beta = &params.beta;
    if beta.len() != spec.param_len() {
        return Err(Error::input("coefficient length does not match spec"));
    }
    let d = spec.regressor_dim();
    let pd = spec.p * d;
    let q0_state = spec.encode_state(q0);

    let mut reg = vec![0.0; d];
    let mut states: Vec<f64> = Vec::with_capacity(y.len());
    let mut out: Vec<f64> = Vec::with_capacity(y.len());
    for t in 0..y.len() {
        let mut s = beta[0];
        for i in 1..=spec.p {
            // lag-i observation relative to the forecast target t+1
            let y_lag = if t + 1 >= i { y[t + 1 - i] } else { y[0] };
            spec.regressors(y_lag, &mut reg);
            for (k, r) in reg.iter().enumerate() {
                s += beta[(i - 1) * d + 1 + k] * r;
            }
        }
        for j in 1..=spec.u {
            let q_lag = if t >= j { states[t - j] } else { q0_state };
            s += beta[pd + j] * q_lag;
        }
        if !s.is_finite() {
            return Err(Error::Divergence(format!(
                "caviar filter produced non-finite state at t={t}"
            )));
        }
        let q_t = spec.decode_state(s)?;
        states.push(s);
        out.push(q_t);
    }
    Ok(out)
}

/// True when a slice is exactly constant.
pub(crate) fn is_constant(y: &[f64]) -> bool {
    y.windows(2).all(|w| w[0] == w[1])
}

pub(crate) fn check_train_range(len: usize, train: &Range<usize>) -> Result<()> {
    if train.start >= train.end || train.end > len {
        return Err(Error::input(format!(
            "train range {train:?} out of bounds for series of length {len}"
        )));
    }
    if train.len() < MIN_TRAIN {
        return Err(Error::input(format!(
            "training range of {} observations is below the practical floor of {MIN_TRAIN}",
            train.len()
        )));
    }
    Ok(())
}

/// Fits the recursion on `train` by multistart pinball minimization.
///
/// Only data inside `train` is touched; q0 comes from the empirical
/// quantile of the configured training prefix.
pub fn caviar_fit(
    y: &ReturnSeries,
    theta: ProbabilityLevel,
    spec: CaviarSpec,
    config: &EstimationConfig,
    train: Range<usize>,
) -> Result<CaviarModel> {
    config.validate()?;
    check_train_range(y.len(), &train)?;
    let tr = &y.values()[train];
    let prefix = &tr[..config.prefix_len(tr.len())];
    let tail = empirical_var_es(prefix, theta)?;
    let q0 = tail.q0;

    if is_constant(tr) {
        let mut beta = vec![0.0; spec.param_len()];
        beta[0] = tr[0];
        let path = vec![tr[0]; tr.len() - 1];
        let fit_loss = losses::pinball_mean(&path, &tr[1..], theta)?;
        return Ok(CaviarModel {
            kind: spec.kind,
            p: spec.p,
            u: spec.u,
            theta,
            beta,
            q0: tr[0],
            fit_loss: Some(fit_loss),
            degenerate: true,
        });
    }

    let objective = |x: &[f64]| caviar_objective(x, &spec, tr, q0, theta);
    let ms = MultistartConfig::from(config);
    let res = optimizer::multistart_minimize(&objective, spec.param_len(), &ms)
        .map_err(|e| Error::Estimation(format!("caviar fit: {e}")))?;

    Ok(CaviarModel {
        kind: spec.kind,
        p: spec.p,
        u: spec.u,
        theta,
        beta: res.x,
        q0,
        fit_loss: Some(res.f),
        degenerate: false,
    })
}

/// Total objective: in-sample pinball loss pairing `path[k]` with `y[k+1]`,
/// or +inf on divergence / domain breaches.
pub(crate) fn caviar_objective(
    x: &[f64],
    spec: &CaviarSpec,
    y: &[f64],
    q0: f64,
    theta: ProbabilityLevel,
) -> f64 {
    let params = CaviarParams {
        beta: x.to_vec(),
    };
    match caviar_filter(&params, spec, y, q0) {
        Ok(path) => {
            if path.iter().any(|q| !q.is_finite() || q.abs() > DIVERGENCE_GUARD) {
                return f64::INFINITY;
            }
            let t = y.len();
            losses::pinball_mean(&path[..t - 1], &y[1..], theta).unwrap_or(f64::INFINITY)
        }
        Err(_) => f64::INFINITY,
    }
}
