//! Derivative-free constrained minimization: a bounded Nelder-Mead simplex
//! search wrapped in the multistart-and-chain scheme used by every fit.
//!
//! The scheme draws `n_starts` random candidates (half uniform in [-1, 1]^d,
//! half standard normal), ranks them by objective value, keeps the `n_keep`
//! best, and refines each survivor with `n_chained` sequential local runs,
//! every run restarting from the previous output with a fresh simplex.
//!
//! Objectives must be total: return `f64::INFINITY` on invalid regions
//! instead of panicking. The engine never evaluates a point outside the
//! sanity box `[-bound, bound]^d` (such points score +inf). All candidate
//! draws happen serially up front, so parallel and serial execution of the
//! chains produce bitwise-identical results for a given seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::EstimationConfig;

/// Knobs of the multistart scheme; mirrors [`EstimationConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultistartConfig {
    pub n_starts: usize,
    pub n_keep: usize,
    pub n_chained: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    /// Half-width of the candidate sanity box.
    pub bound: f64,
}

impl Default for MultistartConfig {
    fn default() -> Self {
        MultistartConfig {
            n_starts: 100,
            n_keep: 3,
            n_chained: 6,
            seed: 0,
            max_iter: 300,
            tol: 1e-9,
            bound: 1e3,
        }
    }
}

impl From<&EstimationConfig> for MultistartConfig {
    fn from(cfg: &EstimationConfig) -> Self {
        MultistartConfig {
            n_starts: cfg.n_starts,
            n_keep: cfg.n_keep,
            n_chained: cfg.n_chained,
            seed: cfg.seed,
            max_iter: cfg.max_iter,
            tol: cfg.tol,
            ..MultistartConfig::default()
        }
    }
}

/// Start/end objective values of one random candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub index: usize,
    pub f_start: f64,
    /// Terminal objective after chaining; equals `f_start` for candidates
    /// that were not kept.
    pub f_end: f64,
    pub kept: bool,
    /// Objective after each run of the chain (kept candidates only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub f_chain: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultistartResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub audit: Vec<CandidateTrace>,
}

fn box_objective<'a, F>(objective: &'a F, bound: f64) -> impl Fn(&[f64]) -> f64 + Sync + 'a
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    move |x: &[f64]| {
        if x.iter().any(|v| !v.is_finite() || v.abs() > bound) {
            f64::INFINITY
        } else {
            let f = objective(x);
            if f.is_nan() {
                f64::INFINITY
            } else {
                f
            }
        }
    }
}

/// One bounded Nelder-Mead run from `x0`.
///
/// Guarantees f* ≤ f(x0); stops after `max_iter` iterations or when the
/// simplex objective spread drops below `tol`. Deterministic. Errors when
/// the starting point itself scores +inf.
pub fn local_minimize<F>(
    objective: &F,
    x0: &[f64],
    max_iter: usize,
    tol: f64,
    bound: f64,
) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("local_minimize: non-finite start"));
    }
    let f = box_objective(objective, bound);
    let f0 = f(x0);
    if !f0.is_finite() {
        return Err(Error::Estimation(
            "local_minimize: infeasible starting point (objective is +inf)".into(),
        ));
    }
    let n = x0.len();
    if n == 0 {
        return Ok((Vec::new(), f0));
    }

    // Standard coefficients: reflection 1, expansion 2, contraction 1/2, shrink 1/2.
    const ALPHA: f64 = 1.0;
    const GAMMA: f64 = 2.0;
    const RHO: f64 = 0.5;
    const SIGMA: f64 = 0.5;

    // Initial simplex around x0, scipy-style steps.
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut v = x0.to_vec();
        let step = if v[i] != 0.0 { 0.05 * v[i].abs() } else { 0.00025 };
        v[i] += step;
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let by_f = |a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)| {
        a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal)
    };
    simplex.sort_by(by_f);

    for _ in 0..max_iter {
        let spread = simplex[n].1 - simplex[0].1;
        if spread.is_finite() && spread <= tol {
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; n];
        for (v, _) in simplex.iter().take(n) {
            for (c, vi) in centroid.iter_mut().zip(v) {
                *c += vi;
            }
        }
        for c in centroid.iter_mut() {
            *c /= n as f64;
        }

        let worst = simplex[n].0.clone();
        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&worst)
            .map(|(c, w)| c + ALPHA * (c - w))
            .collect();
        let f_r = f(&reflect);

        if f_r < simplex[0].1 {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&worst)
                .map(|(c, w)| c + GAMMA * (c + ALPHA * (c - w) - c))
                .collect();
            let f_e = f(&expand);
            simplex[n] = if f_e < f_r { (expand, f_e) } else { (reflect, f_r) };
        } else if f_r < simplex[n - 1].1 {
            simplex[n] = (reflect, f_r);
        } else {
            // Contract: outside toward the reflection when it improved on the
            // worst vertex, inside toward the worst otherwise.
            let (target, f_target) = if f_r < simplex[n].1 {
                (&reflect, f_r)
            } else {
                (&worst, simplex[n].1)
            };
            let contract: Vec<f64> = centroid
                .iter()
                .zip(target)
                .map(|(c, t)| c + RHO * (t - c))
                .collect();
            let f_c = f(&contract);
            if f_c < f_target {
                simplex[n] = (contract, f_c);
            } else {
                let best = simplex[0].0.clone();
                for (v, fv) in simplex.iter_mut().skip(1) {
                    for (vi, bi) in v.iter_mut().zip(&best) {
                        *vi = bi + SIGMA * (*vi - bi);
                    }
                    *fv = f(v);
                }
            }
        }
        simplex.sort_by(by_f);
    }

    let (x_best, f_best) = simplex.swap_remove(0);
    debug_assert!(f_best <= f0);
    Ok((x_best, f_best))
}

/// `n_chained` sequential [`local_minimize`] runs, each starting from the
/// previous output. Returns the terminal point plus the objective after
/// each run (non-increasing by construction).
pub fn chained_minimize<F>(
    objective: &F,
    x0: &[f64],
    n_chained: usize,
    max_iter: usize,
    tol: f64,
    bound: f64,
) -> Result<(Vec<f64>, f64, Vec<f64>)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let mut x = x0.to_vec();
    let mut f = f64::INFINITY;
    let mut trace = Vec::with_capacity(n_chained);
    for _ in 0..n_chained.max(1) {
        let (xn, fn_) = local_minimize(objective, &x, max_iter, tol, bound)?;
        x = xn;
        f = fn_;
        trace.push(f);
    }
    Ok((x, f, trace))
}

/// The full multistart scheme over `dim` free parameters.
///
/// Candidate draw: the first ⌈n_starts/2⌉ candidates are uniform in
/// [-1, 1]^dim, the rest standard normal. Ranking is by objective value
/// with ties broken by draw order; candidates scoring +inf are infeasible.
pub fn multistart_minimize<F>(
    objective: &F,
    dim: usize,
    cfg: &MultistartConfig,
) -> Result<MultistartResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if dim == 0 {
        return Err(Error::input("multistart_minimize: dim must be >= 1"));
    }
    if cfg.n_starts == 0 || cfg.n_keep == 0 || cfg.n_keep > cfg.n_starts {
        return Err(Error::input(format!(
            "multistart_minimize: need 1 <= n_keep <= n_starts, got {}/{}",
            cfg.n_keep, cfg.n_starts
        )));
    }

    let f = box_objective(objective, cfg.bound);

    // All randomness happens here, serially.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_uniform = cfg.n_starts.div_ceil(2);
    let candidates: Vec<Vec<f64>> = (0..cfg.n_starts)
        .map(|i| {
            (0..dim)
                .map(|_| {
                    if i < n_uniform {
                        rng.gen_range(-1.0..=1.0)
                    } else {
                        rng.sample(StandardNormal)
                    }
                })
                .collect()
        })
        .collect();

    let f_starts: Vec<f64> = candidates.par_iter().map(|c| f(c)).collect();

    let mut order: Vec<usize> = (0..cfg.n_starts).collect();
    order.sort_by(|&a, &b| {
        f_starts[a]
            .partial_cmp(&f_starts[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let feasible: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| f_starts[i].is_finite())
        .collect();
    if feasible.is_empty() {
        return Err(Error::Estimation(format!(
            "multistart_minimize: all {} candidates infeasible",
            cfg.n_starts
        )));
    }
    let kept: Vec<usize> = feasible.iter().copied().take(cfg.n_keep).collect();

    let chains: Vec<(usize, Vec<f64>, f64, Vec<f64>)> = kept
        .par_iter()
        .map(|&i| {
            let (x, fx, trace) = chained_minimize(
                objective,
                &candidates[i],
                cfg.n_chained,
                cfg.max_iter,
                cfg.tol,
                cfg.bound,
            )?;
            Ok((i, x, fx, trace))
        })
        .collect::<Result<Vec<_>>>()?;

    let best = chains
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            a.2.partial_cmp(&b.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ia.cmp(ib))
        })
        .map(|(_, c)| c)
        .expect("at least one chain");

    let audit: Vec<CandidateTrace> = (0..cfg.n_starts)
        .map(|i| {
            let chain = chains.iter().find(|c| c.0 == i);
            CandidateTrace {
                index: i,
                f_start: f_starts[i],
                f_end: chain.map(|c| c.2).unwrap_or(f_starts[i]),
                kept: chain.is_some(),
                f_chain: chain.map(|c| c.3.clone()).unwrap_or_default(),
            }
        })
        .collect();

    Ok(MultistartResult {
        x: best.1.clone(),
        f: best.2,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    #[test]
    fn local_converges_on_sphere() {
        let (x, f) = local_minimize(&sphere, &[1.0, 1.0], 500, 1e-12, 1e3).unwrap();
        assert!(f < 1e-10);
        assert!(x.iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn local_on_constant_objective_returns_start() {
        let (x, f) = local_minimize(&|_: &[f64]| 3.5, &[0.2, -0.7], 100, 1e-9, 1e3).unwrap();
        assert_eq!(f, 3.5);
        assert_eq!(x.len(), 2);
    }

    #[test]
    fn local_infeasible_start_errors() {
        let obj = |_: &[f64]| f64::INFINITY;
        assert!(matches!(
            local_minimize(&obj, &[0.0], 10, 1e-9, 1e3),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn chained_cracks_rosenbrock() {
        let (x, f, trace) =
            chained_minimize(&rosenbrock, &[-1.2, 1.0], 6, 300, 1e-12, 1e3).unwrap();
        assert!(f < rosenbrock(&[-1.2, 1.0]));
        assert!(f <= 1e-3, "rosenbrock terminal {f} at {x:?}");
        for w in trace.windows(2) {
            assert!(w[1] <= w[0], "chain must never worsen: {trace:?}");
        }
    }

    #[test]
    fn multistart_descends_below_raw_candidates() {
        let cfg = MultistartConfig {
            n_starts: 40,
            n_keep: 3,
            n_chained: 3,
            seed: 7,
            max_iter: 200,
            tol: 1e-10,
            bound: 1e3,
        };
        let res = multistart_minimize(&sphere, 3, &cfg).unwrap();
        let raw_best = res
            .audit
            .iter()
            .map(|c| c.f_start)
            .fold(f64::INFINITY, f64::min);
        assert!(res.f <= raw_best);
        assert!(res.f < 1e-8);
    }

    #[test]
    fn multistart_is_deterministic() {
        let cfg = MultistartConfig {
            n_starts: 30,
            n_keep: 4,
            seed: 42,
            ..MultistartConfig::default()
        };
        let a = multistart_minimize(&rosenbrock, 2, &cfg).unwrap();
        let b = multistart_minimize(&rosenbrock, 2, &cfg).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.f, b.f);
        assert_eq!(a.audit.len(), b.audit.len());
        for (ta, tb) in a.audit.iter().zip(&b.audit) {
            assert_eq!(ta.f_start, tb.f_start);
            assert_eq!(ta.f_end, tb.f_end);
        }
    }

    #[test]
    fn multistart_all_infeasible_errors() {
        let obj = |_: &[f64]| f64::INFINITY;
        let cfg = MultistartConfig {
            n_starts: 10,
            n_keep: 2,
            ..MultistartConfig::default()
        };
        assert!(matches!(
            multistart_minimize(&obj, 2, &cfg),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn multistart_finds_global_basin() {
        // Two basins near x = ±1; the linear tilt makes x ≈ -1.04 global.
        let two_wells = |x: &[f64]| {
            let v = x[0];
            (v * v - 1.0).powi(2) + 0.3 * v
        };
        // Brute-force oracle for the global minimizer.
        let mut best = (f64::INFINITY, 0.0);
        let mut g = -2.0;
        while g < 2.0 {
            let f = two_wells(&[g]);
            if f < best.0 {
                best = (f, g);
            }
            g += 1e-4;
        }
        let global = best.1;
        assert!(global < -0.9);

        let mut hits = 0;
        for seed in 0..100 {
            let cfg = MultistartConfig {
                n_starts: 100,
                n_keep: 3,
                n_chained: 2,
                seed,
                max_iter: 200,
                tol: 1e-10,
                bound: 1e3,
            };
            let res = multistart_minimize(&two_wells, 1, &cfg).unwrap();
            if (res.x[0] - global).abs() < 0.1 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "global basin found in only {hits}/100 trials");
    }

    #[test]
    fn serial_pool_matches_default_pool() {
        let cfg = MultistartConfig {
            n_starts: 24,
            n_keep: 4,
            n_chained: 3,
            seed: 11,
            max_iter: 150,
            tol: 1e-10,
            bound: 1e3,
        };
        let parallel = multistart_minimize(&rosenbrock, 2, &cfg).unwrap();
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| multistart_minimize(&rosenbrock, 2, &cfg).unwrap());
        assert_eq!(parallel.x, single.x);
        assert_eq!(parallel.f, single.f);
        for (a, b) in parallel.audit.iter().zip(&single.audit) {
            assert_eq!(a.f_end, b.f_end);
        }
    }

    #[test]
    fn chain_monotonic_on_audit() {
        let cfg = MultistartConfig {
            n_starts: 20,
            n_keep: 5,
            n_chained: 6,
            seed: 3,
            max_iter: 150,
            tol: 1e-10,
            bound: 1e3,
        };
        let res = multistart_minimize(&rosenbrock, 2, &cfg).unwrap();
        for tr in res.audit.iter().filter(|t| t.kept) {
            assert!(!tr.f_chain.is_empty());
            assert!(tr.f_chain[0] <= tr.f_start);
            for w in tr.f_chain.windows(2) {
                assert!(w[1] <= w[0]);
            }
            assert_eq!(*tr.f_chain.last().unwrap(), tr.f_end);
        }
    }
}
