//! Joint one-step-ahead Value-at-Risk / Expected Shortfall forecasting for
//! univariate return series.
//!
//! The centrepiece is the CAESar estimator: a conditional autoregressive
//! recursion for the (VaR, ES) pair fitted by a three-step penalized
//! regression (CAViaR quantile fit, residual ES fit, joint refinement).
//! Around it the crate provides:
//!
//! - [`caviar`]: conditional autoregressive quantile models (Engle and
//!   Manganelli, 2004) with AS, SAV, and indirect-GARCH regressors,
//! - [`gas`]: one- and two-factor score-driven competitors (Patton,
//!   Ziegel and Chen, 2019),
//! - [`kquantile`]: ES by averaging quantile fits over a tail partition,
//! - [`losses`]: pinball, Barrera, and Patton scoring functions plus their
//!   soft-constrained variants,
//! - [`optimizer`]: the derivative-free multistart-and-chain minimization
//!   scheme shared by all fits,
//! - [`simulate`]: GARCH(1,1) data-generating processes with closed-form
//!   VaR/ES ground truths,
//! - [`backtest`]: direct ES backtests (McNeil-Frey, Acerbi-Szekely) and
//!   model-comparison tests (Diebold-Mariano, Nadeau-Bengio, loss
//!   difference, encompassing),
//! - [`harness`]: experiment runners over simulated bundles and rolling
//!   block folds of market data.
//!
//! All estimators and tests are deterministic given their seeds; parallel
//! and serial execution produce identical results.

// Validation guards are written as `!(x > 0.0)` so NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod caesar;
pub mod caviar;
pub mod error;
pub mod gas;
pub mod harness;
pub mod kquantile;
pub mod losses;
pub mod optimizer;
pub mod series;
pub mod simulate;

pub use error::{Error, Result};
pub use series::{
    EstimationConfig, FoldPlan, ForecastPath, LossVariant, ProbabilityLevel, ReturnSeries,
};
