//! Score-driven (GAS) competitor models for joint VaR/ES forecasting
//! (Patton, Ziegel and Chen, 2019).
//!
//! The one-factor model drives both targets through a single latent factor:
//!
//! ```text
//! q_t = a e^{k_t},  e_t = b e^{k_t},
//! k_t = beta k_{t-1} + (gamma / e_{t-1}) ((1/theta) 1{y_{t-1} <= q_{t-1}} y_{t-1} - e_{t-1})
//! ```
//!
//! with b < a < 0, so e_t < q_t < 0 holds structurally at every t and the
//! ratio q_t/e_t = a/b is constant along the path.
//!
//! The two-factor model updates the pair directly:
//!
//! ```text
//! [q_t; e_t] = w + [b1 q_{t-1}; b2 e_{t-1}]
//!            + A [ q_{t-1}(theta - 1{y_{t-1} <= q_{t-1}});
//!                  (y_{t-1}/theta) 1{y_{t-1} <= q_{t-1}} - e_{t-1} ]
//! ```
//!
//! It has no structural monotonicity guarantee, so its fit reuses the soft
//! monotonicity penalty of the joint loss.
//!
//! Fits minimize the Patton loss from a default start seeded by the
//! empirical prefix (a,b from the prefix VaR/ES, persistence 0.9, score
//! weight 0.05); the full multistart only runs as a fallback when the
//! default chain fails. GAS1 keeps b < a < 0 by optimizing
//! (alpha, delta) with a = -e^alpha, b = a - e^delta.

use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::caviar::{check_train_range, is_constant, DIVERGENCE_GUARD};
use crate::error::{Error, Result};
use crate::losses;
use crate::optimizer::{self, MultistartConfig};
use crate::series::{
    empirical_var_es, EstimationConfig, ForecastPath, ProbabilityLevel, ReturnSeries,
};

/// Overflow guard on the latent factor: e^{50} already dwarfs any return scale.
const K_GUARD: f64 = 50.0;
/// Fitted path range beyond this multiple of the data range flags instability.
const INSTABILITY_FACTOR: f64 = 10.0;

/// One-factor parameters; requires b < a < 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gas1Params {
    pub a: f64,
    pub b: f64,
    pub beta: f64,
    pub gamma: f64,
    pub k0: f64,
}

impl Gas1Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.b < self.a && self.a < 0.0) {
            return Err(Error::input(format!(
                "GAS1 requires b < a < 0, got a={} b={}",
                self.a, self.b
            )));
        }
        if ![self.a, self.b, self.beta, self.gamma, self.k0]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::input("non-finite GAS1 parameter"));
        }
        Ok(())
    }
}

/// Two-factor parameters. The initial pair must satisfy e ≤ q ≤ 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gas2Params {
    pub w: [f64; 2],
    pub b1: f64,
    pub b2: f64,
    pub a_mat: [[f64; 2]; 2],
    pub q_init: f64,
    pub e_init: f64,
}

impl Gas2Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_init <= self.q_init && self.q_init <= 0.0) {
            return Err(Error::input(format!(
                "GAS2 requires e_init <= q_init <= 0, got q={} e={}",
                self.q_init, self.e_init
            )));
        }
        let flat = [
            self.w[0],
            self.w[1],
            self.b1,
            self.b2,
            self.a_mat[0][0],
            self.a_mat[0][1],
            self.a_mat[1][0],
            self.a_mat[1][1],
            self.q_init,
            self.e_init,
        ];
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(Error::input("non-finite GAS2 parameter"));
        }
        Ok(())
    }
}

/// Runs the one-factor recursion. The output `path[t]` is the forecast
/// formed after observing `y[t]` (the score compares `y[t]` with the
/// forecast that was in force for step t); k0 provides the forecasts in
/// force at the first step.
pub fn gas1_filter(
    params: &Gas1Params,
    y: &[f64],
    theta: ProbabilityLevel,
) -> Result<ForecastPath> {
    params.validate()?;
    if y.is_empty() {
        return Err(Error::input("empty series"));
    }
    let th = theta.get();
    let mut k_prev = params.k0;
    let mut q = Vec::with_capacity(y.len());
    let mut e = Vec::with_capacity(y.len());
    for t in 0..y.len() {
        let scale_prev = k_prev.exp();
        let (y_real, q_prev, e_prev) = if t == 0 {
            (y[0], params.a * scale_prev, params.b * scale_prev)
        } else {
            (y[t], q[t - 1], e[t - 1])
        };
        let hit = if y_real <= q_prev { 1.0 } else { 0.0 };
        let k_t = params.beta * k_prev + params.gamma / e_prev * (hit * y_real / th - e_prev);
        if !k_t.is_finite() || k_t.abs() > K_GUARD {
            return Err(Error::Divergence(format!(
                "GAS1 latent factor left [-{K_GUARD}, {K_GUARD}] at t={t} (k={k_t})"
            )));
        }
        let scale = k_t.exp();
        q.push(params.a * scale);
        e.push(params.b * scale);
        k_prev = k_t;
    }
    ForecastPath::new(q, e, theta)
}

/// Runs the two-factor recursion; same alignment as [`gas1_filter`], with
/// (q_init, e_init) as the forecasts in force at the first step.
pub fn gas2_filter(
    params: &Gas2Params,
    y: &[f64],
    theta: ProbabilityLevel,
) -> Result<ForecastPath> {
    params.validate()?;
    if y.is_empty() {
        return Err(Error::input("empty series"));
    }
    let th = theta.get();
    let mut q = Vec::with_capacity(y.len());
    let mut e = Vec::with_capacity(y.len());
    for t in 0..y.len() {
        let (y_real, q_prev, e_prev) = if t == 0 {
            (y[0], params.q_init, params.e_init)
        } else {
            (y[t], q[t - 1], e[t - 1])
        };
        let hit = if y_real <= q_prev { 1.0 } else { 0.0 };
        let score_q = q_prev * (th - hit);
        let score_e = y_real / th * hit - e_prev;
        let q_t = params.w[0]
            + params.b1 * q_prev
            + params.a_mat[0][0] * score_q
            + params.a_mat[0][1] * score_e;
        let e_t = params.w[1]
            + params.b2 * e_prev
            + params.a_mat[1][0] * score_q
            + params.a_mat[1][1] * score_e;
        if !q_t.is_finite() || !e_t.is_finite() {
            return Err(Error::Divergence(format!(
                "GAS2 produced non-finite state at t={t}"
            )));
        }
        q.push(q_t);
        e.push(e_t);
    }
    ForecastPath::new(q, e, theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GasVariant {
    One,
    Two,
}

/// A fitted score-driven model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum GasModel {
    #[serde(rename = "GAS1")]
    One {
        theta: ProbabilityLevel,
        params: Gas1Params,
        fit_loss: Option<f64>,
        /// Fitted path range exceeded 10x the training return range.
        unstable: bool,
        degenerate: bool,
    },
    #[serde(rename = "GAS2")]
    Two {
        theta: ProbabilityLevel,
        params: Gas2Params,
        fit_loss: Option<f64>,
        unstable: bool,
        degenerate: bool,
    },
}

impl GasModel {
    pub fn theta(&self) -> ProbabilityLevel {
        match self {
            GasModel::One { theta, .. } | GasModel::Two { theta, .. } => *theta,
        }
    }

    pub fn unstable(&self) -> bool {
        match self {
            GasModel::One { unstable, .. } | GasModel::Two { unstable, .. } => *unstable,
        }
    }

    pub fn degenerate(&self) -> bool {
        match self {
            GasModel::One { degenerate, .. } | GasModel::Two { degenerate, .. } => *degenerate,
        }
    }

    pub fn filter(&self, y: &[f64]) -> Result<ForecastPath> {
        match self {
            GasModel::One { theta, params, degenerate, .. } => {
                if *degenerate {
                    Ok(constant_path(params.a, params.b, y.len(), *theta))
                } else {
                    gas1_filter(params, y, *theta)
                }
            }
            GasModel::Two { theta, params, degenerate, .. } => {
                if *degenerate {
                    Ok(constant_path(params.w[0], params.w[1], y.len(), *theta))
                } else {
                    gas2_filter(params, y, *theta)
                }
            }
        }
    }
}

fn constant_path(q: f64, e: f64, len: usize, theta: ProbabilityLevel) -> ForecastPath {
    ForecastPath {
        q: vec![q; len],
        e: vec![e; len],
        theta,
    }
}

fn path_range(path: &ForecastPath) -> f64 {
    let all = path.q.iter().chain(&path.e);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in all {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    hi - lo
}

fn data_range(y: &[f64]) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in y {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    hi - lo
}

/// Nudges an empirical (q, e) seed strictly into the cone e < q < 0.
fn admissible_seed(q_emp: f64, e_emp: f64) -> (f64, f64) {
    let scale = q_emp.abs().max(e_emp.abs()).max(1e-3);
    let a = q_emp.min(-1e-4 * scale);
    let b = e_emp.min(a - 1e-3 * scale);
    (a, b)
}

/// Fits a GAS model on the training range by Patton-loss minimization.
pub fn gas_fit(
    y: &ReturnSeries,
    theta: ProbabilityLevel,
    variant: GasVariant,
    config: &EstimationConfig,
    train: Range<usize>,
) -> Result<GasModel> {
    config.validate()?;
    check_train_range(y.len(), &train)?;
    let tr = &y.values()[train];
    let prefix = &tr[..config.prefix_len(tr.len())];
    let tail = empirical_var_es(prefix, theta)?;
    let (a0, b0) = admissible_seed(tail.q0, tail.e0);

    if is_constant(tr) {
        let c = tr[0].min(0.0);
        return Ok(match variant {
            GasVariant::One => GasModel::One {
                theta,
                params: Gas1Params {
                    a: admissible_seed(c, c).0,
                    b: admissible_seed(c, c).1,
                    beta: 1.0,
                    gamma: 0.0,
                    k0: 0.0,
                },
                fit_loss: None,
                unstable: false,
                degenerate: true,
            },
            GasVariant::Two => GasModel::Two {
                theta,
                params: Gas2Params {
                    w: [tr[0], tr[0]],
                    b1: 0.0,
                    b2: 0.0,
                    a_mat: [[0.0; 2]; 2],
                    q_init: c,
                    e_init: c,
                },
                fit_loss: None,
                unstable: false,
                degenerate: true,
            },
        });
    }

    let ms = MultistartConfig::from(config);
    let range_y = data_range(tr);

    match variant {
        GasVariant::One => {
            // x = (alpha, delta, beta, gamma, k0); a = -e^alpha, b = a - e^delta.
            let unpack = |x: &[f64]| {
                let a = -x[0].exp();
                Gas1Params {
                    a,
                    b: a - x[1].exp(),
                    beta: x[2],
                    gamma: x[3],
                    k0: x[4],
                }
            };
            let obj = |x: &[f64]| {
                let p = unpack(x);
                match gas1_filter(&p, tr, theta) {
                    Ok(path) => {
                        if path.e.iter().any(|v| v.abs() > DIVERGENCE_GUARD) {
                            return f64::INFINITY;
                        }
                        let n = tr.len();
                        losses::patton_mean(&path.e[..n - 1], &path.q[..n - 1], &tr[1..], theta)
                            .unwrap_or(f64::INFINITY)
                    }
                    Err(_) => f64::INFINITY,
                }
            };
            let x0 = vec![(-a0).ln(), (a0 - b0).ln(), 0.9, 0.05, 0.0];
            let fitted = fit_from_default(&obj, &x0, config, &ms)?;
            let params = unpack(&fitted.0);
            let path = gas1_filter(&params, tr, theta)?;
            Ok(GasModel::One {
                theta,
                params,
                fit_loss: Some(fitted.1),
                unstable: path_range(&path) > INSTABILITY_FACTOR * range_y,
                degenerate: false,
            })
        }
        GasVariant::Two => {
            let lambda_e = EstimationConfig::resolve_lambda(config.lambda_e, tr.len());
            let lambda_q = EstimationConfig::resolve_lambda(config.lambda_q, tr.len());
            let (q_init, e_init) = (a0, b0);
            let unpack = |x: &[f64]| Gas2Params {
                w: [x[0], x[1]],
                b1: x[2],
                b2: x[3],
                a_mat: [[x[4], x[5]], [x[6], x[7]]],
                q_init,
                e_init,
            };
            let obj = |x: &[f64]| {
                let p = unpack(x);
                match gas2_filter(&p, tr, theta) {
                    Ok(path) => {
                        if path
                            .q
                            .iter()
                            .chain(&path.e)
                            .any(|v| v.abs() > DIVERGENCE_GUARD)
                        {
                            return f64::INFINITY;
                        }
                        let n = tr.len();
                        losses::penalized_joint_loss(
                            &path.e[..n - 1],
                            &path.q[..n - 1],
                            &tr[1..],
                            theta,
                            lambda_e,
                            lambda_q,
                        )
                        .map(|l| l.value)
                        .unwrap_or(f64::INFINITY)
                    }
                    Err(_) => f64::INFINITY,
                }
            };
            let x0 = vec![0.0, 0.0, 0.9, 0.9, 0.05, 0.0, 0.0, 0.05];
            let fitted = fit_from_default(&obj, &x0, config, &ms)?;
            let params = unpack(&fitted.0);
            let path = gas2_filter(&params, tr, theta)?;
            Ok(GasModel::Two {
                theta,
                params,
                fit_loss: Some(fitted.1),
                unstable: path_range(&path) > INSTABILITY_FACTOR * range_y,
                degenerate: false,
            })
        }
    }
}

/// Chained descent from the default start; full multistart as fallback.
fn fit_from_default<F>(
    obj: &F,
    x0: &[f64],
    config: &EstimationConfig,
    ms: &MultistartConfig,
) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if obj(x0).is_finite() {
        let (x, f, _) = optimizer::chained_minimize(
            obj,
            x0,
            config.n_chained,
            config.max_iter,
            config.tol,
            ms.bound,
        )?;
        if f.is_finite() {
            return Ok((x, f));
        }
    }
    let res = optimizer::multistart_minimize(obj, x0.len(), ms)
        .map_err(|e| Error::Estimation(format!("GAS fit: {e}")))?;
    Ok((res.x, res.f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn theta(v: f64) -> ProbabilityLevel {
        ProbabilityLevel::new(v).unwrap()
    }

    #[test]
    fn gas1_invalid_params_rejected() {
        let bad = Gas1Params {
            a: -1.0,
            b: -0.5,
            beta: 0.9,
            gamma: 0.0,
            k0: 0.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gas1_frozen_factor_constant_paths() {
        let p = Gas1Params {
            a: -1.0,
            b: -1.5,
            beta: 1.0,
            gamma: 0.0,
            k0: 0.3,
        };
        let path = gas1_filter(&p, &[0.5, -0.5, 0.1], theta(0.05)).unwrap();
        let s = 0.3f64.exp();
        for t in 0..3 {
            assert_relative_eq!(path.q[t], -s, max_relative = 1e-14);
            assert_relative_eq!(path.e[t], -1.5 * s, max_relative = 1e-14);
        }
    }

    #[test]
    fn gas1_ratio_is_structurally_constant() {
        let p = Gas1Params {
            a: -1.0,
            b: -2.0,
            beta: 0.9,
            gamma: 0.05,
            k0: 0.0,
        };
        let y: Vec<f64> = (0..500).map(|i| ((i * 31 % 17) as f64 / 17.0 - 0.5) * 4.0).collect();
        let path = gas1_filter(&p, &y, theta(0.05)).unwrap();
        for (q, e) in path.q.iter().zip(&path.e) {
            assert!((q / e - 0.5).abs() < 1e-12);
        }
        // monotonicity holds everywhere by construction
        assert_eq!(path.constraint_violations(), 0);
    }

    #[test]
    fn gas1_single_step_hand_check() {
        let p = Gas1Params {
            a: -1.0,
            b: -1.5,
            beta: 0.9,
            gamma: 0.05,
            k0: 0.0,
        };
        let th = theta(0.05);
        let path = gas1_filter(&p, &[-3.0], th).unwrap();
        // warm-up: q_prev = -1, e_prev = -1.5, y_prev = -3 (violation)
        let k1: f64 = 0.9 * 0.0 + 0.05 / (-1.5) * ((-3.0) / 0.05 - (-1.5));
        assert_relative_eq!(path.q[0], -k1.exp(), max_relative = 1e-12);
        assert_relative_eq!(path.e[0], -1.5 * k1.exp(), max_relative = 1e-12);
    }

    #[test]
    fn gas2_pure_persistence_and_constant_model() {
        let th = theta(0.05);
        let persist = Gas2Params {
            w: [0.0, 0.0],
            b1: 1.0,
            b2: 1.0,
            a_mat: [[0.0; 2]; 2],
            q_init: -0.7,
            e_init: -1.1,
        };
        let path = gas2_filter(&persist, &[0.1, 0.2, 0.3], th).unwrap();
        assert!(path.q.iter().all(|&v| v == -0.7));
        assert!(path.e.iter().all(|&v| v == -1.1));

        let constant = Gas2Params {
            w: [-0.4, -0.6],
            b1: 0.0,
            b2: 0.0,
            a_mat: [[0.0; 2]; 2],
            q_init: -0.7,
            e_init: -1.1,
        };
        let path = gas2_filter(&constant, &[0.1, 0.2, 0.3], th).unwrap();
        assert!(path.q.iter().all(|&v| v == -0.4));
        assert!(path.e.iter().all(|&v| v == -0.6));
    }

    #[test]
    fn gas2_single_step_with_violation() {
        let p = Gas2Params {
            w: [-0.1, -0.2],
            b1: 0.8,
            b2: 0.7,
            a_mat: [[0.01, 0.02], [0.03, 0.04]],
            q_init: -1.0,
            e_init: -2.0,
        };
        let th = theta(0.05);
        let path = gas2_filter(&p, &[-3.0, 0.5], th).unwrap();
        // t=0: y_prev=-3 <= q_prev=-1: hit
        let score_q = -(0.05 - 1.0);
        let score_e = -3.0 / 0.05 - (-2.0);
        let q0 = -0.1 - 0.8 + 0.01 * score_q + 0.02 * score_e;
        let e0 = -0.2 + 0.7 * (-2.0) + 0.03 * score_q + 0.04 * score_e;
        assert_relative_eq!(path.q[0], q0, max_relative = 1e-12);
        assert_relative_eq!(path.e[0], e0, max_relative = 1e-12);
    }

    #[test]
    fn filters_are_pure() {
        let p = Gas1Params {
            a: -0.8,
            b: -1.2,
            beta: 0.95,
            gamma: 0.02,
            k0: 0.1,
        };
        let y: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let a = gas1_filter(&p, &y, theta(0.05)).unwrap();
        let b = gas1_filter(&p, &y, theta(0.05)).unwrap();
        assert_eq!(a.q, b.q);
        assert_eq!(a.e, b.e);
    }

    #[test]
    fn gas2_constant_series_flagged_degenerate() {
        let y = ReturnSeries::new(vec![1.5; 100]).unwrap();
        let cfg = EstimationConfig {
            n_starts: 4,
            n_keep: 1,
            n_chained: 1,
            max_iter: 10,
            ..EstimationConfig::default()
        };
        let m = gas_fit(&y, theta(0.05), GasVariant::Two, &cfg, 0..100).unwrap();
        assert!(m.degenerate());
        let path = m.filter(&[1.5, 1.5]).unwrap();
        assert_eq!(path.q, vec![1.5, 1.5]);
    }

    #[test]
    fn gas_model_json_carries_variant_tag() {
        let m = GasModel::One {
            theta: theta(0.05),
            params: Gas1Params {
                a: -1.0,
                b: -1.5,
                beta: 0.9,
                gamma: 0.05,
                k0: 0.0,
            },
            fit_loss: Some(1.2),
            unstable: false,
            degenerate: false,
        };
        let js = serde_json::to_value(&m).unwrap();
        assert_eq!(js["variant"], "GAS1");
        assert_eq!(js["params"]["a"], -1.0);
        let back: GasModel = serde_json::from_value(js).unwrap();
        assert_eq!(back, m);
    }
}
