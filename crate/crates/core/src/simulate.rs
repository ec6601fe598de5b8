//! GARCH(1,1) data-generating processes with closed-form VaR/ES ground
//! truths for Gaussian and Student-t innovations.
//!
//! Variance recursion (standard form, with the squared lagged return as the
//! ARCH term):
//!
//! ```text
//! sigma2_t = omega + alpha y_{t-1}^2 + beta_g sigma2_{t-1},   y_t = sigma_t eps_t
//! ```
//!
//! seeded at the stationary variance omega / (1 - alpha - beta_g). Student
//! innovations are standardized to unit variance (scaled by
//! sqrt((nu-2)/nu)), so sigma_t is the conditional standard deviation under
//! both innovations; the closed-form quantile/tail-mean formulas are applied
//! on the same standardized scale. Every emitted manifest records both
//! conventions.
//!
//! Ground truths for a standard normal innovation:
//! q = Phi^{-1}(theta), e = -phi(Phi^{-1}(1-theta)) / theta; for Student-t:
//! e = -[(nu + t_q^2) / ((nu-1) theta)] f_nu(t_q) with t_q = F_T^{-1}(theta),
//! both scaled by sigma_t (and the standardization factor for t).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};
use std::path::Path;

use crate::error::{Error, Result};
use crate::series::{ProbabilityLevel, ReturnSeries};

/// Innovation law of the DGP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Innovation {
    #[serde(rename = "NORMAL")]
    Normal,
    #[serde(rename = "STUDENT")]
    Student { nu: f64 },
}

/// GARCH(1,1) coefficients; covariance stationarity requires
/// alpha + beta_g < 1 and nu > 2 for Student innovations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub omega: f64,
    pub alpha: f64,
    pub beta_g: f64,
    pub innovation: Innovation,
}

impl GarchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) || !(self.alpha >= 0.0) || !(self.beta_g >= 0.0) {
            return Err(Error::input(format!(
                "need omega > 0, alpha >= 0, beta_g >= 0; got {self:?}"
            )));
        }
        if self.alpha + self.beta_g >= 1.0 {
            return Err(Error::input(format!(
                "stationarity requires alpha + beta_g < 1, got {}",
                self.alpha + self.beta_g
            )));
        }
        if let Innovation::Student { nu } = self.innovation {
            if !(nu > 2.0) {
                return Err(Error::domain(format!(
                    "Student innovations need nu > 2, got {nu}"
                )));
            }
        }
        Ok(())
    }

    pub fn stationary_variance(&self) -> f64 {
        self.omega / (1.0 - self.alpha - self.beta_g)
    }
}

/// Simulates T observations; returns the series and the conditional
/// standard deviation path. Deterministic given the seed.
pub fn garch_simulate(params: &GarchParams, t: usize, seed: u64) -> Result<(ReturnSeries, Vec<f64>)> {
    params.validate()?;
    if t < 2 {
        return Err(Error::input("need T >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student = match params.innovation {
        Innovation::Normal => None,
        Innovation::Student { nu } => {
            Some((StudentT::new(nu).map_err(|e| Error::input(e.to_string()))?, ((nu - 2.0) / nu).sqrt()))
        }
    };
    let mut sig2 = params.stationary_variance();
    let mut sigma = Vec::with_capacity(t);
    let mut y = Vec::with_capacity(t);
    let mut prev_y = 0.0f64;
    for step in 0..t {
        if step > 0 {
            sig2 = params.omega + params.alpha * prev_y * prev_y + params.beta_g * sig2;
        }
        let s = sig2.sqrt();
        let eps: f64 = match &student {
            None => rng.sample(StandardNormal),
            Some((dist, scale)) => dist.sample(&mut rng) * scale,
        };
        prev_y = s * eps;
        sigma.push(s);
        y.push(prev_y);
    }
    Ok((ReturnSeries::new(y)?, sigma))
}

/// Closed-form one-step (VaR, ES) for a normal innovation scaled by sigma.
pub fn true_var_es_normal(sigma: f64, theta: ProbabilityLevel) -> (f64, f64) {
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let th = theta.get();
    let q = sigma * std_normal.inverse_cdf(th);
    let e = -(sigma / th) * std_normal.pdf(std_normal.inverse_cdf(1.0 - th));
    (q, e)
}

/// Density of the standard Student-t evaluated through its closed form.
fn student_pdf(x: f64, nu: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let ln_c = ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0)
        - 0.5 * (std::f64::consts::PI * nu).ln();
    (ln_c - (nu + 1.0) / 2.0 * (1.0 + x * x / nu).ln()).exp()
}

/// Closed-form one-step (VaR, ES) for a unit-variance Student-t innovation
/// scaled by sigma. The tail formulas act on the plain t distribution and
/// are rescaled by sqrt((nu-2)/nu) to match the standardized innovation.
pub fn true_var_es_student(sigma: f64, nu: f64, theta: ProbabilityLevel) -> Result<(f64, f64)> {
    if !(nu > 2.0) {
        return Err(Error::domain(format!("need nu > 2, got {nu}")));
    }
    let th = theta.get();
    let t_dist = StudentsT::new(0.0, 1.0, nu).map_err(|e| Error::input(e.to_string()))?;
    let t_q = t_dist.inverse_cdf(th);
    let e_std = -(nu + t_q * t_q) / ((nu - 1.0) * th) * student_pdf(t_q, nu);
    let standardize = ((nu - 2.0) / nu).sqrt();
    Ok((sigma * standardize * t_q, sigma * standardize * e_std))
}

/// Distribution selector for the VaR/ES ratio curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum RatioDist {
    #[serde(rename = "NORMAL")]
    Normal { mu: f64, sigma: f64 },
    /// Centered standard Student-t; the ratio is scale-free.
    #[serde(rename = "STUDENT")]
    Student { nu: f64 },
}

/// VaR(theta) / ES(theta) for the given distribution. Errors when the ES is
/// zero. For a centered normal the ratio is scale-free (~0.7975 at 5%);
/// for a non-centered normal it moves with sigma; for a centered Student-t
/// it moves with nu.
pub fn var_es_ratio(dist: RatioDist, theta: ProbabilityLevel) -> Result<f64> {
    let th = theta.get();
    let (q, e) = match dist {
        RatioDist::Normal { mu, sigma } => {
            if !(sigma >= 0.0) {
                return Err(Error::input(format!("sigma must be >= 0, got {sigma}")));
            }
            let (q0, e0) = true_var_es_normal(sigma, theta);
            (mu + q0, mu + e0)
        }
        RatioDist::Student { nu } => {
            if !(nu > 2.0) {
                return Err(Error::domain(format!("need nu > 2, got {nu}")));
            }
            let t_dist = StudentsT::new(0.0, 1.0, nu).map_err(|e| Error::input(e.to_string()))?;
            let t_q = t_dist.inverse_cdf(th);
            let e_std = -(nu + t_q * t_q) / ((nu - 1.0) * th) * student_pdf(t_q, nu);
            (t_q, e_std)
        }
    };
    if e == 0.0 {
        return Err(Error::domain("ES is zero, ratio undefined"));
    }
    Ok(q / e)
}

/// One data-generating process of a simulation bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub id: String,
    pub params: GarchParams,
}

/// Ground-truth (VaR, ES) paths at one probability level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthPath {
    pub theta: f64,
    pub q: Vec<f64>,
    pub e: Vec<f64>,
}

/// One simulated series with its volatility and truth paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedSeries {
    pub seed: u64,
    pub y: Vec<f64>,
    pub sigma: Vec<f64>,
    pub truths: Vec<TruthPath>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpResult {
    pub spec: DgpSpec,
    pub series: Vec<SimulatedSeries>,
}

/// A full simulation bundle: every DGP × series with aligned ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub dgps: Vec<DgpResult>,
    pub t_len: usize,
    pub split: usize,
    pub thetas: Vec<f64>,
    pub master_seed: u64,
    /// Convention notes echoed into every manifest.
    pub notes: Vec<String>,
}

/// Representative equity-index stand-in coefficient sets: three scales of
/// omega crossed with the two innovation laws (Student nu = 8).
pub fn default_dgp_suite() -> Vec<DgpSpec> {
    let scales = [("I", 1.0), ("II", 0.8), ("III", 1.2)];
    let mut out = Vec::new();
    for (label, c) in scales {
        out.push(DgpSpec {
            id: format!("N-{label}"),
            params: GarchParams {
                omega: 5e-6 * c,
                alpha: 0.08,
                beta_g: 0.90,
                innovation: Innovation::Normal,
            },
        });
    }
    for (label, c) in scales {
        out.push(DgpSpec {
            id: format!("t-{label}"),
            params: GarchParams {
                omega: 5e-6 * c,
                alpha: 0.08,
                beta_g: 0.90,
                innovation: Innovation::Student { nu: 8.0 },
            },
        });
    }
    out
}

/// Truth paths for a sigma path under the given innovation.
pub fn truth_paths(
    sigma: &[f64],
    innovation: Innovation,
    thetas: &[f64],
) -> Result<Vec<TruthPath>> {
    thetas
        .iter()
        .map(|&th| {
            let theta = ProbabilityLevel::new(th)?;
            let mut q = Vec::with_capacity(sigma.len());
            let mut e = Vec::with_capacity(sigma.len());
            for &s in sigma {
                let (qt, et) = match innovation {
                    Innovation::Normal => true_var_es_normal(s, theta),
                    Innovation::Student { nu } => true_var_es_student(s, nu, theta)?,
                };
                q.push(qt);
                e.push(et);
            }
            Ok(TruthPath { theta: th, q, e })
        })
        .collect()
}

/// Generates `n_series` seeded series for every DGP, with aligned
/// (sigma, true VaR, true ES) paths at each requested level.
pub fn run_dgp_suite(
    dgps: &[DgpSpec],
    n_series: usize,
    t_len: usize,
    split: usize,
    thetas: &[f64],
    master_seed: u64,
) -> Result<DatasetBundle> {
    if dgps.is_empty() || n_series == 0 {
        return Err(Error::input("need at least one DGP and one series"));
    }
    if split == 0 || split >= t_len {
        return Err(Error::input(format!(
            "split {split} must satisfy 0 < split < T = {t_len}"
        )));
    }
    for d in dgps {
        d.params.validate()?;
    }
    let tasks: Vec<(usize, usize)> = (0..dgps.len())
        .flat_map(|d| (0..n_series).map(move |s| (d, s)))
        .collect();
    let series: Vec<(usize, SimulatedSeries)> = tasks
        .par_iter()
        .map(|&(d, s)| {
            let seed = master_seed
                .wrapping_add(10_000 * d as u64)
                .wrapping_add(s as u64);
            let (y, sigma) = garch_simulate(&dgps[d].params, t_len, seed)?;
            let truths = truth_paths(&sigma, dgps[d].params.innovation, thetas)?;
            Ok((
                d,
                SimulatedSeries {
                    seed,
                    y: y.values().to_vec(),
                    sigma,
                    truths,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let mut dgp_results: Vec<DgpResult> = dgps
        .iter()
        .map(|spec| DgpResult {
            spec: spec.clone(),
            series: Vec::with_capacity(n_series),
        })
        .collect();
    for (d, s) in series {
        dgp_results[d].series.push(s);
    }
    Ok(DatasetBundle {
        dgps: dgp_results,
        t_len,
        split,
        thetas: thetas.to_vec(),
        master_seed,
        notes: vec![
            "variance recursion: sigma2_t = omega + alpha*y_{t-1}^2 + beta_g*sigma2_{t-1} \
             (standard GARCH(1,1) form)"
                .into(),
            "student innovations standardized to unit variance; closed-form tail values \
             rescaled by sqrt((nu-2)/nu)"
                .into(),
            "coefficient sets are representative stand-ins, not fitted to any index".into(),
        ],
    })
}

impl DatasetBundle {
    /// Writes one CSV per series plus a JSON manifest into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for dgp in &self.dgps {
            for (k, s) in dgp.series.iter().enumerate() {
                let path = dir.join(format!("dgp-{}_series-{k:02}.csv", dgp.spec.id));
                let mut w = csv::Writer::from_path(&path)?;
                let mut header = vec!["t".to_string(), "y".to_string(), "sigma".to_string()];
                for tp in &s.truths {
                    header.push(format!("q_true@{}", tp.theta));
                    header.push(format!("e_true@{}", tp.theta));
                }
                w.write_record(&header)?;
                for t in 0..s.y.len() {
                    let mut rec = vec![t.to_string(), s.y[t].to_string(), s.sigma[t].to_string()];
                    for tp in &s.truths {
                        rec.push(tp.q[t].to_string());
                        rec.push(tp.e[t].to_string());
                    }
                    w.write_record(&rec)?;
                }
                w.flush()?;
            }
        }
        let manifest = serde_json::json!({
            "dgps": self.dgps.iter().map(|d| &d.spec).collect::<Vec<_>>(),
            "n_series": self.dgps.first().map(|d| d.series.len()).unwrap_or(0),
            "t_len": self.t_len,
            "split": self.split,
            "thetas": self.thetas,
            "master_seed": self.master_seed,
            "notes": self.notes,
        });
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }
}
