//! Criterion benchmarks for the hot paths: filter recursions, scoring
//! functions, simulation, and a small end-to-end fit.

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use caesar_core::caesar::{caesar_filter, CaesarParams};
use caesar_core::caviar::{caviar_filter, caviar_fit, CaviarParams, CaviarSpec};
use caesar_core::gas::{gas1_filter, Gas1Params};
use caesar_core::losses::{patton_mean, pinball_mean};
use caesar_core::series::{EstimationConfig, ProbabilityLevel, ReturnSeries};
use caesar_core::simulate::{garch_simulate, GarchParams, Innovation};

fn pct_garch() -> GarchParams {
    GarchParams {
        omega: 0.05,
        alpha: 0.08,
        beta_g: 0.90,
        innovation: Innovation::Normal,
    }
}

fn bench_filters(c: &mut Criterion) {
    let (y, _) = garch_simulate(&pct_garch(), 2000, 1).unwrap();
    let y = y.values().to_vec();
    let spec = CaviarSpec::as11();
    let theta = ProbabilityLevel::new(0.05).unwrap();

    let caviar = CaviarParams::new(vec![-0.05, 0.1, 0.3, 0.85], &spec).unwrap();
    c.bench_function("caviar_filter_t2000", |b| {
        b.iter(|| caviar_filter(black_box(&caviar), &spec, black_box(&y), -1.6).unwrap())
    });

    let caesar = CaesarParams::new(
        vec![-0.05, 0.1, 0.3, 0.7, 0.1],
        vec![-0.08, 0.1, 0.35, 0.1, 0.72],
        &spec,
    )
    .unwrap();
    c.bench_function("caesar_filter_t2000", |b| {
        b.iter(|| {
            caesar_filter(black_box(&caesar), &spec, black_box(&y), -1.6, -2.0, theta).unwrap()
        })
    });

    let gas1 = Gas1Params {
        a: -1.6,
        b: -2.0,
        beta: 0.95,
        gamma: 0.02,
        k0: 0.0,
    };
    c.bench_function("gas1_filter_t2000", |b| {
        b.iter(|| gas1_filter(black_box(&gas1), black_box(&y), theta).unwrap())
    });
}

fn bench_losses(c: &mut Criterion) {
    let (y, sigma) = garch_simulate(&pct_garch(), 2000, 2).unwrap();
    let y = y.values().to_vec();
    let theta = ProbabilityLevel::new(0.05).unwrap();
    let q: Vec<f64> = sigma.iter().map(|s| -1.645 * s).collect();
    let e: Vec<f64> = sigma.iter().map(|s| -2.063 * s).collect();
    c.bench_function("pinball_t2000", |b| {
        b.iter(|| pinball_mean(black_box(&q), black_box(&y), theta).unwrap())
    });
    c.bench_function("patton_t2000", |b| {
        b.iter(|| patton_mean(black_box(&e), black_box(&q), black_box(&y), theta).unwrap())
    });
}

fn bench_simulate(c: &mut Criterion) {
    let params = pct_garch();
    c.bench_function("garch_simulate_t2000", |b| {
        b.iter(|| garch_simulate(black_box(&params), 2000, 3).unwrap())
    });
}

fn bench_fit(c: &mut Criterion) {
    let (y, _) = garch_simulate(&pct_garch(), 500, 4).unwrap();
    let series = ReturnSeries::new(y.values().to_vec()).unwrap();
    let cfg = EstimationConfig {
        n_starts: 16,
        n_keep: 2,
        n_chained: 2,
        max_iter: 100,
        seed: 5,
        ..EstimationConfig::default()
    };
    let theta = ProbabilityLevel::new(0.05).unwrap();
    c.bench_function("caviar_fit_t500_small_budget", |b| {
        b.iter(|| caviar_fit(&series, theta, CaviarSpec::as11(), &cfg, 0..500).unwrap())
    });
}

criterion_group!(benches, bench_filters, bench_losses, bench_simulate, bench_fit);
criterion_main!(benches);
