//! K-CAViaR: Expected Shortfall as the average of CAViaR quantile fits over
//! an equispaced partition of the tail.
//!
//! For a target level θ and partition size n, independent CAViaR models are
//! fitted at θ_j = j·θ/n (j = 1..n). The ES path is the arithmetic mean of
//! the n quantile paths; the VaR path is the θ_n = θ fit. No monotonicity
//! constraint ties the sub-paths together, so crossings are possible; the
//! crossing count is exposed for reporting.
//!
//! Sub-fit seeds derive deterministically from the master seed (seed + j),
//! so parallel and serial runs coincide.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::caviar::{caviar_fit, CaviarModel, CaviarSpec};
use crate::error::{Error, Result};
use crate::series::{EstimationConfig, ForecastPath, ProbabilityLevel, ReturnSeries};

/// The n fitted sub-quantile models plus the tail partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KCaviarModel {
    pub theta: ProbabilityLevel,
    pub thetas: Vec<f64>,
    pub models: Vec<CaviarModel>,
}

impl KCaviarModel {
    /// Filters every sub-model over `y` and averages: q̂ is the θ-level
    /// path, ê the mean across the partition.
    pub fn paths(&self, y: &[f64]) -> Result<ForecastPath> {
        let sub: Vec<Vec<f64>> = self
            .models
            .iter()
            .map(|m| m.filter(y))
            .collect::<Result<_>>()?;
        let n = sub.len();
        let q = sub[n - 1].clone();
        let mut e = vec![0.0; y.len()];
        for path in &sub {
            for (acc, v) in e.iter_mut().zip(path) {
                *acc += v;
            }
        }
        for v in e.iter_mut() {
            *v /= n as f64;
        }
        ForecastPath::new(q, e, self.theta)
    }
}

/// Fits the partition on the training range; errors name the failing θ_j.
pub fn kcaviar_fit(
    y: &ReturnSeries,
    theta: ProbabilityLevel,
    n: usize,
    spec: CaviarSpec,
    config: &EstimationConfig,
    train: Range<usize>,
) -> Result<KCaviarModel> {
    if n == 0 {
        return Err(Error::input("partition size n must be >= 1"));
    }
    let thetas: Vec<f64> = (1..=n).map(|j| theta.get() * j as f64 / n as f64).collect();
    let models: Vec<CaviarModel> = thetas
        .par_iter()
        .enumerate()
        .map(|(idx, &tj)| {
            let sub_theta = ProbabilityLevel::new(tj)?;
            let sub_config = EstimationConfig {
                seed: config.seed + (idx as u64 + 1),
                ..config.clone()
            };
            caviar_fit(y, sub_theta, spec, &sub_config, train.clone())
                .map_err(|e| Error::Estimation(format!("K-CAViaR sub-fit at theta={tj}: {e}")))
        })
        .collect::<Result<_>>()?;
    Ok(KCaviarModel {
        theta,
        thetas,
        models,
    })
}

/// Convenience wrapper: fit on `train`, return the in-sample training paths
/// alongside the model.
pub fn kcaviar_estimate(
    y: &ReturnSeries,
    theta: ProbabilityLevel,
    n: usize,
    spec: CaviarSpec,
    config: &EstimationConfig,
    train: Range<usize>,
) -> Result<(ForecastPath, KCaviarModel)> {
    let model = kcaviar_fit(y, theta, n, spec, config, train.clone())?;
    let path = model.paths(&y.values()[train])?;
    Ok((path, model))
}
