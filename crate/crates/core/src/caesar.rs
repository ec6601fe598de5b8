//! CAESar: conditional autoregressive joint (VaR, ES) estimation.
//!
//! Both targets follow a coupled autoregression. For the AS-(1,1)
//! specification used in practice:
//!
//! ```text
//! q_t = b0 + b1 (y_{t-1})+ + b2 (y_{t-1})- + b3 q_{t-1} + b4 e_{t-1}
//! e_t = g0 + g1 (y_{t-1})+ + g2 (y_{t-1})- + g3 q_{t-1} + g4 e_{t-1}
//! ```
//!
//! Estimation is a three-step scheme:
//!
//! 1. fit the quantile equation alone (CAViaR, pinball loss);
//! 2. with the quantile path frozen, fit the residual recursion
//!    r_t = e_t - q_t under the penalized Barrera loss;
//! 3. lift the residual coefficients into ES-equation coefficients and
//!    refine all parameters jointly under the penalized Patton loss,
//!    starting the chained local optimizer from that single lifted point.
//!
//! `LossVariant::BarreraOnly` stops after step 2 (lifted parameters are
//! final); `LossVariant::PattonOnly` skips steps 1-2 and attacks the joint
//! loss with the full multistart directly. The no-cross variant pins the
//! cross coefficients (VaR on lagged ES, ES on lagged VaR) to zero and is
//! estimated on the joint loss only, because the residual route needs the
//! ES equation to depend on the lagged quantile.
//!
//! Alignment and warm-up mirror the CAViaR module: `path[k]` is the
//! one-step-ahead forecast formed from observations up to and including
//! `y[k]` (scored against `y[k+1]`), missing lagged observations take the
//! earliest available value, missing lagged estimates take (q0, e0), and
//! the residual recursion is seeded with r0 = e0 - q0 so that lifting and
//! filtering commute exactly.

use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::caviar::{
    caviar_filter, caviar_fit, check_train_range, is_constant, CaviarParams, CaviarSpec,
    DIVERGENCE_GUARD,
};
use crate::error::{Error, Result};
use crate::losses;
use crate::optimizer::{self, MultistartConfig};
use crate::series::{
    empirical_var_es, EstimationConfig, ForecastPath, LossVariant, ProbabilityLevel, ReturnSeries,
};

/// Coefficients of the joint recursion; each vector has length 1 + p·d + 2u.
///
/// Layout per equation: intercept, p·d regressor weights, u weights on
/// lagged q̂, u weights on lagged ê. For the IG specification the
/// coefficients act on the squared scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaesarParams {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl CaesarParams {
    pub fn new(beta: Vec<f64>, gamma: Vec<f64>, spec: &CaviarSpec) -> Result<Self> {
        let want = spec.joint_param_len();
        if beta.len() != want || gamma.len() != want {
            return Err(Error::input(format!(
                "expected {} coefficients per equation, got beta={} gamma={}",
                want,
                beta.len(),
                gamma.len()
            )));
        }
        if beta.iter().chain(&gamma).any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite coefficient"));
        }
        Ok(CaesarParams { beta, gamma })
    }
}

/// Coefficients of the residual recursion r_t = ê_t - q̂_t (length 1 + p·d + 2u).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualParams {
    pub gamma_tilde: Vec<f64>,
}

impl ResidualParams {
    pub fn new(gamma_tilde: Vec<f64>, spec: &CaviarSpec) -> Result<Self> {
        if gamma_tilde.len() != spec.joint_param_len() {
            return Err(Error::input(format!(
                "expected {} residual coefficients, got {}",
                spec.joint_param_len(),
                gamma_tilde.len()
            )));
        }
        Ok(ResidualParams { gamma_tilde })
    }
}

/// In-sample objective values achieved at each estimation step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub step1_pinball: Option<f64>,
    pub step2_penalized_r: Option<f64>,
    /// Joint objective at the lifted starting point of step 3.
    pub step3_start: Option<f64>,
    pub step3_penalized_joint: Option<f64>,
}

/// A fitted CAESar model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaesarModel {
    pub spec: CaviarSpec,
    pub theta: ProbabilityLevel,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub q0: f64,
    pub e0: f64,
    pub step_losses: StepLosses,
    pub config_echo: EstimationConfig,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl CaesarModel {
    pub fn params(&self) -> Result<CaesarParams> {
        CaesarParams::new(self.beta.clone(), self.gamma.clone(), &self.spec)
    }

    /// Runs the fitted joint recursion over a series.
    pub fn filter(&self, y: &[f64]) -> Result<ForecastPath> {
        caesar_filter(&self.params()?, &self.spec, y, self.q0, self.e0, self.theta)
    }
}

/// Runs the joint recursion over `y`. (q0, e0) seed the missing lagged
/// estimates of the warm-up; e0 ≤ q0 is expected but not enforced. The
/// recursion itself is level-free; `theta` only labels the output path.
pub fn caesar_filter(
    params: &CaesarParams,
    spec: &CaviarSpec,
    y: &[f64],
    q0: f64,
    e0: f64,
    theta: ProbabilityLevel,
) -> Result<ForecastPath> {
    if !q0.is_finite() || !e0.is_finite() {
        return Err(Error::input("q0 and e0 must be finite"));
    }
    if y.is_empty() {
        return Err(Error::input("empty series"));
    }
    let want = spec.joint_param_len();
    if params.beta.len() != want || params.gamma.len() != want {
        return Err(Error::input("coefficient length does not match spec"));
    }
    let d = spec.regressor_dim();
    let pd = spec.p * d;
    let q0_state = spec.encode_state(q0);
    let e0_state = spec.encode_state(e0);

    let mut reg = vec![0.0; d];
    let mut q_states: Vec<f64> = Vec::with_capacity(y.len());
    let mut e_states: Vec<f64> = Vec::with_capacity(y.len());
    let mut q_out: Vec<f64> = Vec::with_capacity(y.len());
    let mut e_out: Vec<f64> = Vec::with_capacity(y.len());

    for t in 0..y.len() {
        let mut sq = params.beta[0];
        let mut se = params.gamma[0];
        for i in 1..=spec.p {
            let y_lag = if t + 1 >= i { y[t + 1 - i] } else { y[0] };
            spec.regressors(y_lag, &mut reg);
            for (k, r) in reg.iter().enumerate() {
                let idx = (i - 1) * d + 1 + k;
                sq += params.beta[idx] * r;
                se += params.gamma[idx] * r;
            }
        }
        for j in 1..=spec.u {
            let q_lag = if t >= j { q_states[t - j] } else { q0_state };
            let e_lag = if t >= j { e_states[t - j] } else { e0_state };
            sq += params.beta[pd + j] * q_lag + params.beta[pd + spec.u + j] * e_lag;
            se += params.gamma[pd + j] * q_lag + params.gamma[pd + spec.u + j] * e_lag;
        }
        if !sq.is_finite() || !se.is_finite() {
            return Err(Error::Divergence(format!(
                "caesar filter produced non-finite state at t={t}"
            )));
        }
        q_out.push(spec.decode_state(sq)?);
        e_out.push(spec.decode_state(se)?);
        q_states.push(sq);
        e_states.push(se);
    }

    ForecastPath::new(q_out, e_out, theta)
}

/// Runs the residual recursion given a quantile path from step 1.
///
/// Returns the residual path on the output scale (r_t = ê_t - q̂_t), so that
/// ê is recoverable as q̂ + r for every specification. `q0` must match the
/// initialization used to produce `q_path`; `r0` seeds the missing lagged
/// residuals (r0 = e0 - q0 when seeding from the empirical prefix).
pub fn residual_filter(
    params: &ResidualParams,
    spec: &CaviarSpec,
    y: &[f64],
    q_path: &[f64],
    q0: f64,
    r0: f64,
) -> Result<Vec<f64>> {
    if y.len() != q_path.len() {
        return Err(Error::input(format!(
            "series ({}) and quantile path ({}) length mismatch",
            y.len(),
            q_path.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::input("empty series"));
    }
    if !q0.is_finite() || !r0.is_finite() {
        return Err(Error::input("q0 and r0 must be finite"));
    }
    let gt = &params.gamma_tilde;
    if gt.len() != spec.joint_param_len() {
        return Err(Error::input("coefficient length does not match spec"));
    }
    let d = spec.regressor_dim();
    let pd = spec.p * d;
    let q0_state = spec.encode_state(q0);
    // On the squared scale the seed residual state is e0² - q0².
    let r0_state = spec.encode_state(q0 + r0) - q0_state;

    let mut reg = vec![0.0; d];
    let mut r_states: Vec<f64> = Vec::with_capacity(y.len());
    let mut out: Vec<f64> = Vec::with_capacity(y.len());
    for t in 0..y.len() {
        let mut s = gt[0];
        for i in 1..=spec.p {
            let y_lag = if t + 1 >= i { y[t + 1 - i] } else { y[0] };
            spec.regressors(y_lag, &mut reg);
            for (k, r) in reg.iter().enumerate() {
                s += gt[(i - 1) * d + 1 + k] * r;
            }
        }
        for j in 1..=spec.u {
            let q_lag = if t >= j {
                spec.encode_state(q_path[t - j])
            } else {
                q0_state
            };
            let r_lag = if t >= j { r_states[t - j] } else { r0_state };
            s += gt[pd + j] * q_lag + gt[pd + spec.u + j] * r_lag;
        }
        if !s.is_finite() {
            return Err(Error::Divergence(format!(
                "residual filter produced non-finite state at t={t}"
            )));
        }
        let e_t = spec.decode_state(spec.encode_state(q_path[t]) + s)?;
        r_states.push(s);
        out.push(e_t - q_path[t]);
    }
    Ok(out)
}

/// Lifts residual coefficients into ES-equation coefficients and extends
/// the quantile coefficients with zeroed cross slots:
///
/// ```text
/// gamma_j = gt_j + b_j                      j = 0..=pd
/// gamma_j = gt_j + b_j - gt_{j+u}           j = pd+1..=pd+u
/// gamma_j = gt_j                            j = pd+u+1..=pd+2u
/// ```
///
/// Filtering with the lifted pair reproduces the step-1 quantile path and
/// satisfies ê = q̂ + r exactly.
pub fn lift_residual_params(
    residual: &ResidualParams,
    beta_caviar: &CaviarParams,
    spec: &CaviarSpec,
) -> Result<CaesarParams> {
    let gt = &residual.gamma_tilde;
    let b = &beta_caviar.beta;
    let joint_len = spec.joint_param_len();
    if gt.len() != joint_len || b.len() != spec.param_len() {
        return Err(Error::input(format!(
            "lift: expected residual len {} and caviar len {}, got {} and {}",
            joint_len,
            spec.param_len(),
            gt.len(),
            b.len()
        )));
    }
    let pd = spec.p * spec.regressor_dim();
    let u = spec.u;

    let mut beta = vec![0.0; joint_len];
    beta[..=pd + u].copy_from_slice(&b[..=pd + u]);

    let mut gamma = vec![0.0; joint_len];
    for j in 0..=pd {
        gamma[j] = gt[j] + b[j];
    }
    for j in 1..=u {
        gamma[pd + j] = gt[pd + j] + b[pd + j] - gt[pd + u + j];
        gamma[pd + u + j] = gt[pd + u + j];
    }
    CaesarParams::new(beta, gamma, spec)
}

/// Lagged values needed for a one-step-ahead forecast, oldest first.
///
/// The q/e entries are contemporaneous with the observations: `q[k]` is the
/// forecast that was in force for the same step as `y[k]` (for a filter run
/// this is q0 followed by the path shifted one step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecentState {
    /// Last p (or more) observations.
    pub y: Vec<f64>,
    /// Last u (or more) VaR estimates.
    pub q: Vec<f64>,
    /// Last u (or more) ES estimates.
    pub e: Vec<f64>,
}

/// One application of the joint recursion beyond the observed sample:
/// the forecast for the step after `state.y.last()`. Equals the last filter
/// output on the same observations.
pub fn caesar_forecast(model: &CaesarModel, state: &RecentState) -> Result<(f64, f64)> {
    let spec = &model.spec;
    if state.y.len() < spec.p || state.q.len() < spec.u || state.e.len() < spec.u {
        return Err(Error::input(format!(
            "recent state too short: need y >= {}, q and e >= {}",
            spec.p, spec.u
        )));
    }
    let params = model.params()?;
    let d = spec.regressor_dim();
    let pd = spec.p * d;
    let mut reg = vec![0.0; d];
    let mut sq = params.beta[0];
    let mut se = params.gamma[0];
    for i in 1..=spec.p {
        let y_lag = state.y[state.y.len() - i];
        spec.regressors(y_lag, &mut reg);
        for (k, r) in reg.iter().enumerate() {
            let idx = (i - 1) * d + 1 + k;
            sq += params.beta[idx] * r;
            se += params.gamma[idx] * r;
        }
    }
    for j in 1..=spec.u {
        let q_lag = spec.encode_state(state.q[state.q.len() - j]);
        let e_lag = spec.encode_state(state.e[state.e.len() - j]);
        sq += params.beta[pd + j] * q_lag + params.beta[pd + spec.u + j] * e_lag;
        se += params.gamma[pd + j] * q_lag + params.gamma[pd + spec.u + j] * e_lag;
    }
    Ok((spec.decode_state(sq)?, spec.decode_state(se)?))
}

fn pack_free(params: &CaesarParams, spec: &CaviarSpec, no_cross: bool) -> Vec<f64> {
    let pd = spec.p * spec.regressor_dim();
    let u = spec.u;
    let mut z = Vec::with_capacity(2 * spec.joint_param_len());
    for (idx, v) in params.beta.iter().enumerate() {
        let cross = idx > pd + u; // beta on lagged ES
        if !(no_cross && cross) {
            z.push(*v);
        }
    }
    for (idx, v) in params.gamma.iter().enumerate() {
        let cross = idx > pd && idx <= pd + u; // gamma on lagged VaR
        if !(no_cross && cross) {
            z.push(*v);
        }
    }
    z
}

fn unpack_free(z: &[f64], spec: &CaviarSpec, no_cross: bool) -> CaesarParams {
    let pd = spec.p * spec.regressor_dim();
    let u = spec.u;
    let joint_len = spec.joint_param_len();
    let mut it = z.iter().copied();
    let mut beta = vec![0.0; joint_len];
    for (idx, slot) in beta.iter_mut().enumerate() {
        let cross = idx > pd + u;
        if !(no_cross && cross) {
            *slot = it.next().expect("packed vector too short");
        }
    }
    let mut gamma = vec![0.0; joint_len];
    for (idx, slot) in gamma.iter_mut().enumerate() {
        let cross = idx > pd && idx <= pd + u;
        if !(no_cross && cross) {
            *slot = it.next().expect("packed vector too short");
        }
    }
    CaesarParams { beta, gamma }
}

#[allow(clippy::too_many_arguments)]
fn joint_objective(
    z: &[f64],
    spec: &CaviarSpec,
    no_cross: bool,
    y: &[f64],
    q0: f64,
    e0: f64,
    theta: ProbabilityLevel,
    lambda_e: f64,
    lambda_q: f64,
) -> f64 {
    let params = unpack_free(z, spec, no_cross);
    match caesar_filter(&params, spec, y, q0, e0, theta) {
        Ok(path) => {
            if path
                .q
                .iter()
                .chain(&path.e)
                .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_GUARD)
            {
                return f64::INFINITY;
            }
            let t = y.len();
            losses::penalized_joint_loss(
                &path.e[..t - 1],
                &path.q[..t - 1],
                &y[1..],
                theta,
                lambda_e,
                lambda_q,
            )
            .map(|l| l.value)
            .unwrap_or(f64::INFINITY)
        }
        Err(_) => f64::INFINITY,
    }
}

/// Three-step CAESar estimation on the training range.
pub fn caesar_fit(
    y: &ReturnSeries,
    theta: ProbabilityLevel,
    spec: CaviarSpec,
    config: &EstimationConfig,
    train: Range<usize>,
) -> Result<CaesarModel> {
    config.validate()?;
    check_train_range(y.len(), &train)?;
    let tr = &y.values()[train.clone()];
    let prefix = &tr[..config.prefix_len(tr.len())];
    let tail = empirical_var_es(prefix, theta)?;
    let (q0, e0) = (tail.q0, tail.e0);
    let joint_len = spec.joint_param_len();

    if is_constant(tr) {
        let c = tr[0];
        let mut beta = vec![0.0; joint_len];
        let mut gamma = vec![0.0; joint_len];
        beta[0] = c;
        gamma[0] = c;
        let path = vec![c; tr.len() - 1];
        let step1 = losses::pinball_mean(&path, &tr[1..], theta)?;
        return Ok(CaesarModel {
            spec,
            theta,
            beta,
            gamma,
            q0: c,
            e0: c,
            step_losses: StepLosses {
                step1_pinball: Some(step1),
                ..StepLosses::default()
            },
            config_echo: config.clone(),
            degenerate: true,
        });
    }

    let lambda_r = EstimationConfig::resolve_lambda(config.lambda_r, tr.len());
    let lambda_e = EstimationConfig::resolve_lambda(config.lambda_e, tr.len());
    let lambda_q = EstimationConfig::resolve_lambda(config.lambda_q, tr.len());
    let ms = MultistartConfig::from(config);
    let no_cross = config.no_cross;

    let obj3 =
        |z: &[f64]| joint_objective(z, &spec, no_cross, tr, q0, e0, theta, lambda_e, lambda_q);
    let free_dim = 2 * joint_len - if no_cross { 2 * spec.u } else { 0 };

    // The no-cross variant cannot be reached through the residual route:
    // the Barrera step regresses the ES residual on the lagged quantile.
    if no_cross || config.loss_variant == LossVariant::PattonOnly {
        let res = joint_multistart_with_fallback(&obj3, free_dim, &ms, &spec, no_cross, q0, e0)?;
        let params = unpack_free(&res.0, &spec, no_cross);
        return Ok(CaesarModel {
            spec,
            theta,
            beta: params.beta,
            gamma: params.gamma,
            q0,
            e0,
            step_losses: StepLosses {
                step3_penalized_joint: Some(res.1),
                ..StepLosses::default()
            },
            config_echo: config.clone(),
            degenerate: false,
        });
    }

    // Step 1: quantile equation alone.
    let step1 = caviar_fit(y, theta, spec, config, train)
        .map_err(|e| Error::Estimation(format!("caesar step 1: {e}")))?;
    let step1_params = step1.params()?;
    let q_path = caviar_filter(&step1_params, &spec, tr, q0)?;
    let r0 = e0 - q0;

    // Step 2: residual recursion with the quantile path frozen. Candidates
    // are ranked by the penalized loss so infeasible residual signs lose.
    let n = tr.len();
    let obj2 = |g: &[f64]| {
        let params = ResidualParams {
            gamma_tilde: g.to_vec(),
        };
        match residual_filter(&params, &spec, tr, &q_path, q0, r0) {
            Ok(r) => {
                if r.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_GUARD) {
                    return f64::INFINITY;
                }
                losses::penalized_r_loss(&r[..n - 1], &tr[1..], &q_path[..n - 1], theta, lambda_r)
                    .map(|l| l.value)
                    .unwrap_or(f64::INFINITY)
            }
            Err(_) => f64::INFINITY,
        }
    };
    let res2 = optimizer::multistart_minimize(&obj2, joint_len, &ms)
        .map_err(|e| Error::Estimation(format!("caesar step 2: {e}")))?;
    let residual = ResidualParams {
        gamma_tilde: res2.x,
    };
    let lifted = lift_residual_params(&residual, &step1_params, &spec)?;

    let mut step_losses = StepLosses {
        step1_pinball: step1.fit_loss,
        step2_penalized_r: Some(res2.f),
        ..StepLosses::default()
    };

    let params = if config.loss_variant == LossVariant::BarreraOnly {
        let z0 = pack_free(&lifted, &spec, false);
        let f0 = obj3(&z0);
        if f0.is_finite() {
            step_losses.step3_start = Some(f0);
            step_losses.step3_penalized_joint = Some(f0);
        }
        lifted
    } else {
        // Step 3: joint refinement from the single lifted starting point.
        let z0 = pack_free(&lifted, &spec, false);
        let f0 = obj3(&z0);
        if f0.is_finite() {
            let (z, f3, _) = optimizer::chained_minimize(
                &obj3,
                &z0,
                config.n_chained,
                config.max_iter,
                config.tol,
                ms.bound,
            )?;
            step_losses.step3_start = Some(f0);
            step_losses.step3_penalized_joint = Some(f3);
            unpack_free(&z, &spec, false)
        } else {
            // The lifted point breaches the log barrier (some ê_t >= 0):
            // fall back to the full multistart on the joint loss.
            let res = joint_multistart_with_fallback(&obj3, free_dim, &ms, &spec, false, q0, e0)?;
            step_losses.step3_penalized_joint = Some(res.1);
            unpack_free(&res.0, &spec, false)
        }
    };

    Ok(CaesarModel {
        spec,
        theta,
        beta: params.beta,
        gamma: params.gamma,
        q0,
        e0,
        step_losses,
        config_echo: config.clone(),
        degenerate: false,
    })
}

/// Multistart on the joint loss; if every random candidate breaches the log
/// barrier, retry the chain from a persistence model pinned near (q0, e0).
fn joint_multistart_with_fallback<F>(
    obj: &F,
    dim: usize,
    ms: &MultistartConfig,
    spec: &CaviarSpec,
    no_cross: bool,
    q0: f64,
    e0: f64,
) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    match optimizer::multistart_minimize(obj, dim, ms) {
        Ok(res) => Ok((res.x, res.f)),
        Err(Error::Estimation(_)) => {
            let pd = spec.p * spec.regressor_dim();
            let joint_len = spec.joint_param_len();
            let mut beta = vec![0.0; joint_len];
            let mut gamma = vec![0.0; joint_len];
            beta[0] = spec.encode_state(q0) * 0.1;
            beta[pd + 1] = 0.9;
            gamma[0] = spec.encode_state(e0) * 0.1;
            gamma[pd + spec.u + 1] = 0.9;
            let z0 = pack_free(&CaesarParams { beta, gamma }, spec, no_cross);
            let (z, f, _) = optimizer::chained_minimize(
                obj,
                &z0,
                ms.n_chained,
                ms.max_iter,
                ms.tol,
                ms.bound,
            )
            .map_err(|e| Error::Estimation(format!("caesar joint fit: {e}")))?;
            Ok((z, f))
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caviar::CaviarKind;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn theta(v: f64) -> ProbabilityLevel {
        ProbabilityLevel::new(v).unwrap()
    }

    fn as11() -> CaviarSpec {
        CaviarSpec::as11()
    }

    fn params(beta: [f64; 5], gamma: [f64; 5]) -> CaesarParams {
        CaesarParams::new(beta.to_vec(), gamma.to_vec(), &as11()).unwrap()
    }

    #[test]
    fn zero_coefficients_zero_paths() {
        let p = params([0.0; 5], [0.0; 5]);
        let path = caesar_filter(&p, &as11(), &[0.4, -0.2, 0.9], -1.0, -2.0, theta(0.05)).unwrap();
        assert!(path.q.iter().all(|&v| v == 0.0));
        assert!(path.e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_persistence_keeps_initials() {
        let p = params([0.0, 0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 0.0, 1.0]);
        let path = caesar_filter(&p, &as11(), &[0.1, -0.4, 0.2, 0.0], -1.0, -2.0, theta(0.05)).unwrap();
        assert!(path.q.iter().all(|&v| v == -1.0));
        assert!(path.e.iter().all(|&v| v == -2.0));
    }

    #[test]
    fn one_step_hand_recursion_flags_violation() {
        let p = params([-0.1, 0.0, 0.5, 0.0, 0.0], [-0.2, 0.0, 0.6, 0.0, 0.0]);
        let path = caesar_filter(&p, &as11(), &[-1.0], 0.0, 0.0, theta(0.05)).unwrap();
        assert_relative_eq!(path.q[0], 0.4, max_relative = 1e-14);
        assert_relative_eq!(path.e[0], 0.4, max_relative = 1e-14);
        assert_eq!(path.constraint_violations(), 1);
    }

    #[test]
    fn residual_zero_map_and_persistence() {
        let spec = as11();
        let q_path = [-1.0, -1.1, -0.9];
        let y = [0.2, -0.3, 0.1];
        let zero = ResidualParams::new(vec![0.0; 5], &spec).unwrap();
        let r = residual_filter(&zero, &spec, &y, &q_path, -1.0, -0.5).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));

        let persist = ResidualParams::new(vec![0.0, 0.0, 0.0, 0.0, 1.0], &spec).unwrap();
        let r = residual_filter(&persist, &spec, &y, &q_path, -1.0, -0.5).unwrap();
        for v in &r {
            assert_relative_eq!(v, &-0.5, max_relative = 1e-12);
        }
    }

    #[test]
    fn residual_matches_direct_recursion() {
        let spec = as11();
        let gt = [0.05, -0.1, -0.2, 0.15, 0.4];
        let y = [0.5, -1.0, 0.25];
        let q_path = [-0.8, -1.2, -0.7];
        let (q0, r0) = (-1.0, -0.3);
        let got = residual_filter(
            &ResidualParams::new(gt.to_vec(), &spec).unwrap(),
            &spec,
            &y,
            &q_path,
            q0,
            r0,
        )
        .unwrap();
        // Independent re-evaluation: r[t] uses y[t] and the lagged (q, r).
        let mut expect: Vec<f64> = Vec::new();
        for t in 0..3 {
            let q_lag = if t >= 1 { q_path[t - 1] } else { q0 };
            let r_lag = if t >= 1 { expect[t - 1] } else { r0 };
            let v = gt[0] + gt[1] * f64::max(y[t], 0.0) + gt[2] * f64::max(-y[t], 0.0)
                + gt[3] * q_lag
                + gt[4] * r_lag;
            expect.push(v);
        }
        for (g, e) in got.iter().zip(&expect) {
            assert_relative_eq!(g, e, max_relative = 1e-12);
        }
    }

    #[test]
    fn lift_zero_residual_copies_quantile_equation() {
        let spec = as11();
        let b = CaviarParams::new(vec![0.1, 0.2, 0.3, 0.4], &spec).unwrap();
        let gt = ResidualParams::new(vec![0.0; 5], &spec).unwrap();
        let lifted = lift_residual_params(&gt, &b, &spec).unwrap();
        assert_eq!(lifted.beta, vec![0.1, 0.2, 0.3, 0.4, 0.0]);
        assert_eq!(lifted.gamma, vec![0.1, 0.2, 0.3, 0.4, 0.0]);
    }

    #[test]
    fn lift_moves_residual_persistence_into_cross_terms() {
        let spec = as11();
        let b = CaviarParams::new(vec![0.0; 4], &spec).unwrap();
        let g = 0.7;
        let gt = ResidualParams::new(vec![0.0, 0.0, 0.0, 0.0, g], &spec).unwrap();
        let lifted = lift_residual_params(&gt, &b, &spec).unwrap();
        assert_eq!(lifted.gamma, vec![0.0, 0.0, 0.0, -g, g]);
    }

    fn lifting_roundtrip_case(spec: CaviarSpec, seed: u64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let joint_len = spec.joint_param_len();
        let caviar_len = spec.param_len();
        let (b, gt): (Vec<f64>, Vec<f64>) = if spec.kind == CaviarKind::Ig {
            // Keep the squared-scale recursion inside its positive domain.
            let b: Vec<f64> = (0..caviar_len)
                .map(|i| {
                    if i == 0 {
                        rng.gen_range(0.05..0.2)
                    } else {
                        rng.gen_range(0.0..0.3)
                    }
                })
                .collect();
            let gt: Vec<f64> = (0..joint_len).map(|_| rng.gen_range(0.0..0.2)).collect();
            (b, gt)
        } else {
            let b: Vec<f64> = (0..caviar_len).map(|_| rng.gen_range(-0.45..0.45)).collect();
            let gt: Vec<f64> = (0..joint_len).map(|_| rng.gen_range(-0.45..0.45)).collect();
            (b, gt)
        };
        let y: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (q0, e0) = (-1.0, -1.5);

        let bp = CaviarParams::new(b, &spec).unwrap();
        let q_path = caviar_filter(&bp, &spec, &y, q0).unwrap();
        let gtp = ResidualParams::new(gt, &spec).unwrap();
        let r = residual_filter(&gtp, &spec, &y, &q_path, q0, e0 - q0).unwrap();
        let lifted = lift_residual_params(&gtp, &bp, &spec).unwrap();
        let path = caesar_filter(&lifted, &spec, &y, q0, e0, ProbabilityLevel::new(0.05).unwrap()).unwrap();
        for t in 0..y.len() {
            assert!(
                (path.q[t] - q_path[t]).abs() <= tol,
                "q mismatch at t={t}: {} vs {}",
                path.q[t],
                q_path[t]
            );
            assert!(
                (path.e[t] - (q_path[t] + r[t])).abs() <= tol,
                "e mismatch at t={t}"
            );
        }
    }

    #[test]
    fn lifting_roundtrips_all_specs() {
        for seed in 0..10 {
            lifting_roundtrip_case(as11(), seed, 1e-10);
            lifting_roundtrip_case(CaviarSpec::new(CaviarKind::Sav, 1, 1).unwrap(), seed, 1e-10);
            lifting_roundtrip_case(CaviarSpec::new(CaviarKind::As, 2, 2).unwrap(), seed, 1e-10);
            lifting_roundtrip_case(CaviarSpec::new(CaviarKind::Ig, 1, 1).unwrap(), seed, 1e-9);
        }
    }

    #[test]
    fn forecast_consistent_with_extended_filter() {
        // Observing one more point and filtering the extended series must
        // agree with a single application of the recursion.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let beta: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.4..0.4)).collect();
            let gamma: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.4..0.4)).collect();
            let y: Vec<f64> = (0..41).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = CaesarParams::new(beta.clone(), gamma.clone(), &as11()).unwrap();
            let model = CaesarModel {
                spec: as11(),
                theta: theta(0.05),
                beta,
                gamma,
                q0: -1.0,
                e0: -1.4,
                step_losses: StepLosses::default(),
                config_echo: EstimationConfig::default(),
                degenerate: false,
            };
            let ext = caesar_filter(&p, &as11(), &y, -1.0, -1.4, theta(0.05)).unwrap();
            // Contemporaneous state after the 41st observation: q[k]/e[k]
            // are the forecasts for the same slot as y[k].
            let mut q_hist = vec![-1.0];
            q_hist.extend_from_slice(&ext.q[..40]);
            let mut e_hist = vec![-1.4];
            e_hist.extend_from_slice(&ext.e[..40]);
            let state = RecentState {
                y: y.clone(),
                q: q_hist,
                e: e_hist,
            };
            let (q_next, e_next) = caesar_forecast(&model, &state).unwrap();
            assert_relative_eq!(q_next, ext.q[40], max_relative = 1e-12);
            assert_relative_eq!(e_next, ext.e[40], max_relative = 1e-12);
        }
    }

    #[test]
    fn filter_is_causal_in_prefixes() {
        let p = params([-0.05, 0.1, 0.4, 0.6, 0.1], [-0.08, 0.1, 0.5, 0.1, 0.55]);
        let y: Vec<f64> = (0..70).map(|i| ((i * 41) % 31) as f64 / 31.0 - 0.5).collect();
        let full = caesar_filter(&p, &as11(), &y, -1.0, -1.5, theta(0.05)).unwrap();
        let prefix = caesar_filter(&p, &as11(), &y[..40], -1.0, -1.5, theta(0.05)).unwrap();
        assert_eq!(&full.q[..40], &prefix.q[..]);
        assert_eq!(&full.e[..40], &prefix.e[..]);
    }

    #[test]
    fn forecast_trivial_models() {
        let zero = CaesarModel {
            spec: as11(),
            theta: theta(0.05),
            beta: vec![0.0; 5],
            gamma: vec![0.0; 5],
            q0: -1.0,
            e0: -2.0,
            step_losses: StepLosses::default(),
            config_echo: EstimationConfig::default(),
            degenerate: false,
        };
        let state = RecentState {
            y: vec![0.3],
            q: vec![-0.5],
            e: vec![-0.9],
        };
        assert_eq!(caesar_forecast(&zero, &state).unwrap(), (0.0, 0.0));

        let persist = CaesarModel {
            beta: vec![0.0, 0.0, 0.0, 1.0, 0.0],
            gamma: vec![0.0, 0.0, 0.0, 0.0, 1.0],
            ..zero
        };
        assert_eq!(caesar_forecast(&persist, &state).unwrap(), (-0.5, -0.9));

        let missing = RecentState {
            y: vec![],
            q: vec![-0.5],
            e: vec![-0.9],
        };
        assert!(caesar_forecast(&persist, &missing).is_err());
    }

    fn small_garch_series(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (omega, alpha, beta) = (0.05, 0.08, 0.90);
        let mut sig2 = omega / (1.0 - alpha - beta);
        let mut out = Vec::with_capacity(n);
        let mut prev = 0.0f64;
        for _ in 0..n {
            sig2 = omega + alpha * prev * prev + beta * sig2;
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            prev = sig2.sqrt() * z;
            out.push(prev);
        }
        out
    }

    fn quick_config() -> EstimationConfig {
        EstimationConfig {
            n_starts: 24,
            n_keep: 2,
            n_chained: 3,
            max_iter: 120,
            seed: 5,
            ..EstimationConfig::default()
        }
    }

    #[test]
    fn fit_step3_never_worse_than_lifted_start() {
        let y = ReturnSeries::new(small_garch_series(3, 400)).unwrap();
        let m = caesar_fit(&y, theta(0.05), as11(), &quick_config(), 0..400).unwrap();
        let s = m.step_losses;
        assert!(s.step1_pinball.is_some());
        assert!(s.step2_penalized_r.is_some());
        let (start, end) = (s.step3_start.unwrap(), s.step3_penalized_joint.unwrap());
        assert!(end <= start, "step 3 worsened: {end} > {start}");
    }

    #[test]
    fn barrera_only_stops_at_lifted_params() {
        let y = ReturnSeries::new(small_garch_series(4, 300)).unwrap();
        let cfg = EstimationConfig {
            loss_variant: LossVariant::BarreraOnly,
            ..quick_config()
        };
        let m = caesar_fit(&y, theta(0.05), as11(), &cfg, 0..300).unwrap();
        // No refinement happened: the recorded joint loss is the start value.
        assert_eq!(m.step_losses.step3_start, m.step_losses.step3_penalized_joint);
        // The quantile cross slot stays at its lifted zero.
        assert_eq!(m.beta[4], 0.0);
    }

    #[test]
    fn no_cross_pins_cross_coefficients() {
        let y = ReturnSeries::new(small_garch_series(5, 300)).unwrap();
        let cfg = EstimationConfig {
            no_cross: true,
            ..quick_config()
        };
        let m = caesar_fit(&y, theta(0.05), as11(), &cfg, 0..300).unwrap();
        assert_eq!(m.beta[4], 0.0);
        assert_eq!(m.gamma[3], 0.0);
        assert!(m.step_losses.step1_pinball.is_none());
    }

    #[test]
    fn constant_series_degenerates() {
        let y = ReturnSeries::new(vec![0.0; 200]).unwrap();
        let m = caesar_fit(&y, theta(0.05), as11(), &quick_config(), 0..200).unwrap();
        assert!(m.degenerate);
        let path = m.filter(&[0.0; 20]).unwrap();
        assert!(path.q.iter().all(|&v| v == 0.0));
        assert!(path.e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn model_json_shape() {
        let y = ReturnSeries::new(small_garch_series(6, 300)).unwrap();
        let m = caesar_fit(&y, theta(0.05), as11(), &quick_config(), 0..300).unwrap();
        let js = serde_json::to_value(&m).unwrap();
        for key in ["spec", "theta", "beta", "gamma", "q0", "e0", "step_losses", "config_echo"] {
            assert!(js.get(key).is_some(), "missing key {key}");
        }
        let back: CaesarModel = serde_json::from_value(js).unwrap();
        assert_eq!(back, m);
    }
}
