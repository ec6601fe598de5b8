//! End-to-end runs of the `caesar` binary over temp files.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_caesar"))
}

/// Writes a small `date,return` CSV with mildly heteroskedastic values.
fn write_returns_csv(path: &Path, n: usize, seed: u64) -> std::io::Result<()> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    let mut next = || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut rows = String::from("date,return\n");
    let mut vol = 1.0f64;
    for i in 0..n {
        let u1: f64 = next().max(1e-12);
        let u2: f64 = next();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        vol = (0.05 + 0.9 * vol * vol + 0.05 * z * z).sqrt();
        let r = vol * z;
        // synthetic weekday-ish calendar, strictly increasing
        let day = 1 + (i % 28);
        let month = 1 + (i / 28) % 12;
        let year = 2000 + (i / 336);
        rows.push_str(&format!("{year:04}-{month:02}-{day:02},{r}\n"));
    }
    std::fs::write(path, rows)
}

#[test]
fn fit_then_forecast_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("asset.csv");
    write_returns_csv(&data, 400, 7).unwrap();
    let model = dir.path().join("model.json");

    let out = bin()
        .args(["fit", "--data"])
        .arg(&data)
        .args(["--model", "caesar", "--theta", "0.05", "--seed", "3"])
        .arg("--out")
        .arg(&model)
        .env("RAYON_NUM_THREADS", "2")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "fit failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let js: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    assert!(js["beta"].is_array());
    assert!(js["gamma"].is_array());

    let out = bin()
        .args(["forecast", "--data"])
        .arg(&data)
        .arg("--model")
        .arg(&model)
        .output()
        .unwrap();
    assert!(out.status.success());
    let fc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(fc["model"], "CAESAR");
    assert!(fc["q_next"].is_number());
    assert!(fc["e_next"].as_f64().unwrap() <= fc["q_next"].as_f64().unwrap() + 1e-9);
}

#[test]
fn simulate_emits_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("bundle");
    let out = bin()
        .args(["simulate", "--n-series", "2", "--length", "120", "--split", "90"])
        .args(["--thetas", "0.05", "--seed", "4", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "simulate failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("manifest.json").exists());
    assert!(out_dir.join("dgp-N-I_series-00.csv").exists());
    assert!(out_dir.join("dgp-t-III_series-01.csv").exists());
}

#[test]
fn backtest_reads_forecast_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("asset.csv");
    write_returns_csv(&data, 300, 9).unwrap();
    // crude but honest constant forecasts on this scale
    let mut fc = String::from("q,e\n");
    for _ in 0..300 {
        fc.push_str("-1.8,-2.3\n");
    }
    let fc_path = dir.path().join("fc.csv");
    std::fs::write(&fc_path, fc).unwrap();
    let report = dir.path().join("bt.json");

    let out = bin()
        .args(["backtest", "--data"])
        .arg(&data)
        .arg("--forecast")
        .arg(&fc_path)
        .args(["--theta", "0.05", "--n-boot", "2000", "--seed", "1", "--out"])
        .arg(&report)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "backtest failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let js: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let tests = js["tests"].as_array().unwrap();
    assert_eq!(tests.len(), 3);
    for t in tests {
        let p = t["p_value"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn evaluate_simulation_mode_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("study");
    let dgps = dir.path().join("dgps.json");
    std::fs::write(
        &dgps,
        r#"[{"id":"N-X","params":{"omega":0.05,"alpha":0.08,"beta_g":0.9,"innovation":{"kind":"NORMAL"}}}]"#,
    )
    .unwrap();
    let out = bin()
        .args(["evaluate", "--simulation"])
        .args(["--models", "caviar,gas1", "--thetas", "0.05"])
        .args(["--n-series", "2", "--length", "240", "--split", "180"])
        .args(["--n-boot", "200", "--seed", "11"])
        .arg("--dgps")
        .arg(&dgps)
        .arg("--out")
        .arg(&out_dir)
        .env("RAYON_NUM_THREADS", "2")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "evaluate failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["rows.csv", "cells.csv", "report.json"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
}

#[test]
fn evaluate_empirical_mode_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("aaa.csv");
    write_returns_csv(&a, 430, 21).unwrap();
    let run = |out_name: &str| {
        let out_dir = dir.path().join(out_name);
        let out = bin()
            .args(["evaluate", "--data"])
            .arg(&a)
            .args(["--models", "caesar,caviar", "--thetas", "0.05"])
            .args(["--window", "330", "--train-len", "260", "--stride", "100"])
            .args(["--n-boot", "200", "--seed", "5", "--units", "pct"])
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "evaluate failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read(out_dir.join("report.json")).unwrap()
    };
    let first = run("run1");
    let second = run("run2");
    assert_eq!(first, second, "seeded evaluate must be byte-identical");
}

#[test]
fn bad_inputs_exit_nonzero() {
    let out = bin()
        .args(["fit", "--data", "/nonexistent.csv", "--model", "caesar"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
