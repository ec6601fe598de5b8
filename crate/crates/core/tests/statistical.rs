//! Statistical behaviour checks on simulated data: elicitability smoke
//! tests for the losses, fit-quality checks for every estimator against
//! known ground truth, and the crossing/size properties the estimators are
//! supposed to deliver. All randomness is seeded.

use caesar_core::caesar::caesar_fit;
use caesar_core::caviar::{caviar_fit, CaviarSpec};
use caesar_core::gas::{gas_fit, GasModel, GasVariant};
use caesar_core::kquantile::kcaviar_fit;
use caesar_core::losses::{barrera_mean, patton_mean, pinball_mean};
use caesar_core::series::{EstimationConfig, ProbabilityLevel, ReturnSeries};
use caesar_core::simulate::{garch_simulate, true_var_es_normal, GarchParams, Innovation};
use caesar_core::backtest::{encompassing_test, violation_set};
use caesar_core::ForecastPath;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn theta(v: f64) -> ProbabilityLevel {
    ProbabilityLevel::new(v).unwrap()
}

fn standard_normal_sample(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Percentage-scale GARCH(1,1) with Gaussian innovations.
fn pct_garch() -> GarchParams {
    GarchParams {
        omega: 0.05,
        alpha: 0.08,
        beta_g: 0.90,
        innovation: Innovation::Normal,
    }
}

#[test]
fn patton_loss_is_minimized_near_truth() {
    // Joint elicitability smoke check: at T = 10_000 the empirical loss at
    // the true constants beats 50 perturbed constant pairs in >= 95/100
    // seeded trials.
    let th = theta(0.05);
    let (q_true, e_true) = true_var_es_normal(1.0, th);
    let mut wins = 0;
    for trial in 0..100u64 {
        let y = standard_normal_sample(10_000, 900 + trial);
        let q_path = vec![q_true; y.len()];
        let e_path = vec![e_true; y.len()];
        let loss_true = patton_mean(&e_path, &q_path, &y, th).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5_000 + trial);
        let beaten = (0..50).all(|_| {
            let dq: f64 = rng.gen_range(0.05..0.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let de: f64 = rng.gen_range(0.05..0.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let q_p = (q_true + dq).min(-0.05);
            let e_p = (e_true + de).min(q_p - 0.01);
            let qv = vec![q_p; y.len()];
            let ev = vec![e_p; y.len()];
            let loss_pert = patton_mean(&ev, &qv, &y, th).unwrap();
            loss_true <= loss_pert
        });
        if beaten {
            wins += 1;
        }
    }
    assert!(wins >= 95, "true constants won only {wins}/100 trials");
}

#[test]
fn barrera_loss_locates_the_es_var_gap() {
    // With the true VaR plugged in, a grid search over constant residuals
    // lands within 0.05 of the true ES - VaR gap.
    let th = theta(0.05);
    let (q_true, e_true) = true_var_es_normal(1.0, th);
    let gap = e_true - q_true;
    let y = standard_normal_sample(100_000, 41);
    let q_path = vec![q_true; y.len()];
    let mut best = (f64::INFINITY, 0.0);
    let mut r = -1.0;
    while r <= 0.0 {
        let r_path = vec![r; y.len()];
        let loss = barrera_mean(&r_path, &y, &q_path, th).unwrap();
        if loss < best.0 {
            best = (loss, r);
        }
        r += 0.005;
    }
    assert!(
        (best.1 - gap).abs() < 0.05,
        "grid argmin {} vs true gap {gap}",
        best.1
    );
}

fn fit_config(seed: u64) -> EstimationConfig {
    EstimationConfig {
        seed,
        ..EstimationConfig::default()
    }
}

#[test]
fn caviar_recovers_normal_quantile() {
    let y = ReturnSeries::new(standard_normal_sample(2000, 7)).unwrap();
    let th = theta(0.05);
    let m = caviar_fit(&y, th, CaviarSpec::as11(), &fit_config(1), 0..2000).unwrap();
    let path = m.filter(y.values()).unwrap();
    let mean_q = path.iter().sum::<f64>() / path.len() as f64;
    assert!(
        (mean_q - (-1.645)).abs() < 0.15,
        "long-run fitted VaR {mean_q} too far from -1.645"
    );
}

#[test]
fn caviar_tracks_garch_volatility() {
    let (y, sigma) = garch_simulate(&pct_garch(), 2000, 21).unwrap();
    let th = theta(0.05);
    let m = caviar_fit(&y, th, CaviarSpec::as11(), &fit_config(2), 0..2000).unwrap();
    let path = m.filter(y.values()).unwrap();
    // True one-step VaR for observation k+1 is sigma[k+1] * z_theta; the
    // filter's path[k] forecasts the same slot.
    let z = -1.6448536269515;
    let pred = &path[..path.len() - 1];
    let truth: Vec<f64> = sigma[1..].iter().map(|s| s * z).collect();
    let corr = pearson(pred, &truth);
    assert!(corr >= 0.8, "correlation with true VaR path only {corr}");
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

#[test]
fn caviar_violation_frequency_is_calibrated() {
    // Median in-sample violation rate over 20 seeded series within 3
    // percentage points of theta.
    let th = theta(0.05);
    let mut rates = Vec::new();
    for seed in 0..20 {
        let (y, _) = garch_simulate(&pct_garch(), 1500, 100 + seed).unwrap();
        let m = caviar_fit(&y, th, CaviarSpec::as11(), &fit_config(seed), 0..1500).unwrap();
        let path = m.filter(y.values()).unwrap();
        let viol = violation_set(&y.values()[1..], &path[..1499]);
        rates.push(viol.len() as f64 / 1499.0);
    }
    rates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = 0.5 * (rates[9] + rates[10]);
    assert!(
        (median - 0.05).abs() <= 0.03,
        "median violation rate {median}"
    );
}

#[test]
fn kcaviar_matches_normal_tail_mean() {
    let y = ReturnSeries::new(standard_normal_sample(4000, 77)).unwrap();
    let th = theta(0.05);
    let m = kcaviar_fit(&y, th, 10, CaviarSpec::as11(), &fit_config(3), 0..4000).unwrap();
    let path = m.paths(y.values()).unwrap();
    let mean_e = path.e.iter().sum::<f64>() / path.e.len() as f64;
    assert!(
        (mean_e - (-2.063)).abs() < 0.2,
        "long-run K-CAViaR tail mean {mean_e} too far from -2.063"
    );
}

#[test]
fn kcaviar_crossing_frequency_is_small() {
    // Crossings only happen where sub-quantile paths cross; on
    // well-specified data they stay below 5% of test times.
    let (y, _) = garch_simulate(&pct_garch(), 1750, 3).unwrap();
    let th = theta(0.05);
    let m = kcaviar_fit(&y, th, 10, CaviarSpec::as11(), &fit_config(4), 0..1500).unwrap();
    let path = m.paths(y.values()).unwrap();
    let test = &path.q[1499..1749];
    let test_e = &path.e[1499..1749];
    let crossings = test.iter().zip(test_e).filter(|(q, e)| e > q).count();
    assert!(
        crossings as f64 / 250.0 <= 0.05,
        "{crossings}/250 crossings out of sample"
    );
}

#[test]
fn gas1_stays_within_reach_of_caesar() {
    // On a well-specified percentage-scale series the one-factor model is
    // correctly specified, so its out-of-sample Patton loss lands within
    // 50% of CAESar's.
    let (y, _) = garch_simulate(&pct_garch(), 1750, 11).unwrap();
    let th = theta(0.05);
    let caesar = caesar_fit(&y, th, CaviarSpec::as11(), &fit_config(5), 0..1500).unwrap();
    let gas = gas_fit(&y, th, GasVariant::One, &fit_config(5), 0..1500).unwrap();
    let cpath = caesar.filter(y.values()).unwrap();
    let gpath = gas.filter(y.values()).unwrap();
    let y_test = &y.values()[1500..1750];
    let lc = patton_mean(&cpath.e[1499..1749], &cpath.q[1499..1749], y_test, th).unwrap();
    let lg = patton_mean(&gpath.e[1499..1749], &gpath.q[1499..1749], y_test, th).unwrap();
    assert!(
        (lg - lc).abs() <= 0.5 * lc.abs(),
        "GAS1 Patton loss {lg} not within 50% of CAESar's {lc}"
    );
    // structural ratio check on the fitted paths
    if let GasModel::One { params, .. } = &gas {
        let target = params.a / params.b;
        for (q, e) in gpath.q.iter().zip(&gpath.e) {
            assert!((q / e - target).abs() < 1e-12);
        }
    } else {
        panic!("expected one-factor model");
    }
}

#[test]
fn caesar_respects_monotonicity_out_of_sample() {
    let (y, _) = garch_simulate(&pct_garch(), 1750, 29).unwrap();
    let th = theta(0.05);
    let m = caesar_fit(&y, th, CaviarSpec::as11(), &fit_config(6), 0..1500).unwrap();
    let path = m.filter(y.values()).unwrap();
    let crossings = path.q[1499..1749]
        .iter()
        .zip(&path.e[1499..1749])
        .filter(|(q, e)| e > q)
        .count();
    assert!(crossings <= 2, "{crossings}/250 crossings out of sample");
}

#[test]
fn violation_fraction_matches_theta_on_truth() {
    // Binomial sanity: true VaR paths violate at rate ~theta.
    let (y, sigma) = garch_simulate(&pct_garch(), 20_000, 55).unwrap();
    let th = theta(0.05);
    let q_true: Vec<f64> = sigma.iter().map(|s| true_var_es_normal(*s, th).0).collect();
    let viol = violation_set(y.values(), &q_true);
    let rate = viol.len() as f64 / 20_000.0;
    assert!((rate - 0.05).abs() < 0.01, "violation rate {rate}");
}

#[test]
fn encompassing_detects_noise_added_to_a_good_forecaster() {
    // B = A + noise: rejections (A outperforms B) must exceed the nominal
    // 5% chance level across seeds.
    let th = theta(0.05);
    let mut rejections = 0;
    let n_trials = 20;
    for seed in 0..n_trials {
        let (y, sigma) = garch_simulate(&pct_garch(), 300, 400 + seed).unwrap();
        let truth: Vec<(f64, f64)> = sigma.iter().map(|s| true_var_es_normal(*s, th)).collect();
        let qa: Vec<f64> = truth.iter().map(|t| t.0).collect();
        let ea: Vec<f64> = truth.iter().map(|t| t.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let qb: Vec<f64> = qa
            .iter()
            .map(|q| q * (1.0 + 0.35 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let eb: Vec<f64> = ea
            .iter()
            .map(|e| e * (1.0 + 0.35 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let a = ForecastPath::new(qa, ea, th).unwrap();
        let b = ForecastPath::new(qb, eb, th).unwrap();
        let rep = encompassing_test(&a, &b, y.values(), th, 2000, 600 + seed).unwrap();
        if rep.reject_at_5pct {
            rejections += 1;
        }
    }
    assert!(
        rejections > 2,
        "only {rejections}/{n_trials} rejections on noisy copies"
    );
}

#[test]
fn simulated_innovation_tail_mean_matches_closed_form() {
    // The standardized innovations y_t / sigma_t of a simulated path have a
    // theta-tail mean within 1% of the closed form at 10^7 draws, for both
    // innovation laws.
    let th = theta(0.05);
    let n = 10_000_000;
    for (params, truth) in [
        (pct_garch(), true_var_es_normal(1.0, th)),
        (
            GarchParams {
                innovation: Innovation::Student { nu: 8.0 },
                ..pct_garch()
            },
            caesar_core::simulate::true_var_es_student(1.0, 8.0, th).unwrap(),
        ),
    ] {
        let (y, sigma) = garch_simulate(&params, n, 123).unwrap();
        let (q_true, e_true) = truth;
        let mut sum = 0.0;
        let mut count = 0u64;
        for (yt, st) in y.values().iter().zip(&sigma) {
            let eps = yt / st;
            if eps <= q_true {
                sum += eps;
                count += 1;
            }
        }
        let tail_mean = sum / count as f64;
        let rel = ((tail_mean - e_true) / e_true).abs();
        assert!(
            rel < 0.01,
            "{:?}: tail mean {tail_mean} vs formula {e_true} (rel {rel})",
            params.innovation
        );
    }
}

#[test]
fn pinball_in_sample_beats_unconditional_benchmark() {
    // The fitted conditional quantile must outperform the best constant.
    let (y, _) = garch_simulate(&pct_garch(), 1500, 61).unwrap();
    let th = theta(0.05);
    let m = caviar_fit(&y, th, CaviarSpec::as11(), &fit_config(8), 0..1500).unwrap();
    let path = m.filter(y.values()).unwrap();
    let fitted = pinball_mean(&path[..1499], &y.values()[1..], th).unwrap();
    let mut best_const = f64::INFINITY;
    let mut q = -6.0;
    while q < 0.0 {
        let c = vec![q; 1499];
        best_const = best_const.min(pinball_mean(&c, &y.values()[1..], th).unwrap());
        q += 0.01;
    }
    assert!(
        fitted < best_const,
        "conditional fit {fitted} vs best constant {best_const}"
    );
}
