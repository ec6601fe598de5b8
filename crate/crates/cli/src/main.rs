//! `caesar`: joint VaR/ES forecasting from the command line.
//!
//! Subcommands: `fit`, `forecast`, `simulate`, `backtest`, `evaluate`.
//! Exit codes: 0 success, 2 completed with per-cell failures (report still
//! written), 1 fatal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use caesar_core::backtest::{acerbi_szekely_test, mnf_test, ZVariant};
use caesar_core::caesar::{caesar_fit, CaesarModel};
use caesar_core::caviar::{caviar_fit, CaviarKind, CaviarModel, CaviarSpec};
use caesar_core::gas::{gas_fit, GasModel, GasVariant};
use caesar_core::harness::{
    run_empirical_evaluation, run_simulation_study, EmpiricalConfig, HarnessOptions, ModelKind,
    SimStudyConfig,
};
use caesar_core::kquantile::{kcaviar_fit, KCaviarModel};
use caesar_core::series::{
    read_series_csv, EstimationConfig, ProbabilityLevel, ReturnMode, ReturnSeries,
};
use caesar_core::simulate::{default_dgp_suite, run_dgp_suite, DgpSpec};

#[derive(Parser)]
#[command(
    name = "caesar",
    version,
    about = "Joint one-step-ahead Value-at-Risk / Expected Shortfall forecasting",
    long_about = "Fits conditional autoregressive VaR/ES models (CAESar, CAViaR, K-CAViaR) and \
                  score-driven competitors (GAS1, GAS2), simulates GARCH ground truth, and runs \
                  bootstrap backtests and rolling block-fold evaluations."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit one model on a return series and emit its JSON
    Fit(FitArgs),
    /// One-step-ahead (VaR, ES) forecast from a fitted model JSON
    Forecast(ForecastArgs),
    /// Generate GARCH series with analytic VaR/ES ground truth
    Simulate(SimulateArgs),
    /// Run the direct ES backtests on forecast paths
    Backtest(BacktestArgs),
    /// Rolling block-fold evaluation, or the simulation study with --simulation
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    /// ln(p_t / p_{t-1}) when the data file holds prices
    Log,
    /// p_t / p_{t-1} - 1 when the data file holds prices
    Pct,
}

impl From<ModeArg> for ReturnMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Log => ReturnMode::Log,
            ModeArg::Pct => ReturnMode::Pct,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Two-column CSV `date,price` or `date,return` with a header
    #[arg(long)]
    data: PathBuf,
    /// Price-to-return conversion when the file holds prices
    #[arg(long, value_enum, default_value = "log")]
    mode: ModeArg,
}

#[derive(Args)]
struct EstArgs {
    /// Estimation config JSON (optional; defaults otherwise)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
}

impl EstArgs {
    fn load(&self) -> Result<EstimationConfig> {
        let mut cfg: EstimationConfig = match &self.config {
            Some(p) => serde_json::from_str(
                &std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?,
            )?,
            None => EstimationConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// caesar | caviar | kcaviar | gas1 | gas2
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 0.05)]
    theta: f64,
    /// Regressor specification: AS | SAV | IG
    #[arg(long, default_value = "AS")]
    spec: String,
    /// Observation lags
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// Estimate lags
    #[arg(long, default_value_t = 1)]
    u: usize,
    /// Tail partition size for kcaviar
    #[arg(long, default_value_t = 10)]
    kcaviar_n: usize,
    /// Training length (default: the whole series)
    #[arg(long)]
    train_len: Option<usize>,
    #[command(flatten)]
    est: EstArgs,
    /// Output file for the model JSON (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Fitted model JSON (any model kind; detected from its fields)
    #[arg(long)]
    model: PathBuf,
    /// Output file (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory for per-series CSVs and the manifest
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    n_series: usize,
    #[arg(long, default_value_t = 1750)]
    length: usize,
    #[arg(long, default_value_t = 1500)]
    split: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated probability levels
    #[arg(long, default_value = "0.05,0.025,0.01")]
    thetas: String,
    /// JSON file with custom DGP specs (default: the six stand-in processes)
    #[arg(long)]
    dgps: Option<PathBuf>,
}

#[derive(Args)]
struct BacktestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// CSV of forecast paths with `q` and `e` columns aligned to the data rows
    #[arg(long)]
    forecast: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    theta: f64,
    #[arg(long, default_value_t = 10_000)]
    n_boot: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Input series (repeatable); the asset name is the file stem
    #[arg(long)]
    data: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "log")]
    mode: ModeArg,
    /// Run the simulation study against GARCH ground truth instead
    #[arg(long, default_value_t = false)]
    simulation: bool,
    /// Comma-separated model list
    #[arg(long, alias = "model", default_value = "caesar,caviar,kcaviar,gas1,gas2")]
    models: String,
    /// Comma-separated probability levels
    #[arg(long, alias = "theta", default_value = "0.05,0.025,0.01")]
    thetas: String,
    /// Fold window (empirical mode)
    #[arg(long, default_value_t = 1764)]
    window: usize,
    /// Training length per fold (empirical) or per series (simulation)
    #[arg(long, default_value_t = 1512)]
    train_len: usize,
    /// Fold stride (empirical mode)
    #[arg(long, default_value_t = 252)]
    stride: usize,
    /// Simulation mode: series per process
    #[arg(long, default_value_t = 20)]
    n_series: usize,
    /// Simulation mode: series length
    #[arg(long, default_value_t = 1750)]
    length: usize,
    /// Simulation mode: train/test split
    #[arg(long, default_value_t = 1500)]
    split: usize,
    /// Simulation mode: custom DGP spec JSON
    #[arg(long)]
    dgps: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    n_boot: u32,
    #[arg(long, default_value_t = 10)]
    kcaviar_n: usize,
    /// Unit convention label echoed into the reports
    #[arg(long, default_value = "raw")]
    units: String,
    #[command(flatten)]
    est: EstArgs,
    /// Output directory for the report tables
    #[arg(long)]
    out: PathBuf,
}

fn parse_thetas(s: &str) -> Result<Vec<f64>> {
    let thetas: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().context("bad theta"))
        .collect::<Result<_>>()?;
    for &t in &thetas {
        ProbabilityLevel::new(t)?;
    }
    Ok(thetas)
}

fn parse_models(s: &str) -> Result<Vec<ModelKind>> {
    s.split(',')
        .map(|m| m.trim().parse::<ModelKind>().map_err(Into::into))
        .collect()
}

fn load_dgps(path: &Option<PathBuf>) -> Result<Vec<DgpSpec>> {
    match path {
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => Ok(default_dgp_suite()),
    }
}

fn emit(out: &Option<PathBuf>, payload: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            std::fs::write(p, payload)?;
        }
        None => println!("{payload}"),
    }
    Ok(())
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let series = read_series_csv(&args.data.data, args.data.mode.into())?;
    let theta = ProbabilityLevel::new(args.theta)?;
    let est = args.est.load()?;
    let kind: CaviarKind = args.spec.parse()?;
    let spec = CaviarSpec::new(kind, args.p, args.u)?;
    let train = 0..args.train_len.unwrap_or(series.len());
    let model: ModelKind = args.model.parse()?;
    let json = match model {
        ModelKind::Caviar => {
            serde_json::to_string_pretty(&caviar_fit(&series, theta, spec, &est, train)?)?
        }
        ModelKind::Caesar => {
            serde_json::to_string_pretty(&caesar_fit(&series, theta, spec, &est, train)?)?
        }
        ModelKind::KCaviar => serde_json::to_string_pretty(&kcaviar_fit(
            &series,
            theta,
            args.kcaviar_n,
            spec,
            &est,
            train,
        )?)?,
        ModelKind::Gas1 => {
            serde_json::to_string_pretty(&gas_fit(&series, theta, GasVariant::One, &est, train)?)?
        }
        ModelKind::Gas2 => {
            serde_json::to_string_pretty(&gas_fit(&series, theta, GasVariant::Two, &est, train)?)?
        }
    };
    emit(&args.out, &json)
}

/// One-step-ahead (q, e). Every filter's final output is the forecast for
/// the step after the last observation.
fn one_step(model_json: &serde_json::Value, y: &[f64]) -> Result<(f64, Option<f64>, String)> {
    if model_json.get("gamma").is_some() && model_json.get("spec").is_some() {
        let m: CaesarModel = serde_json::from_value(model_json.clone())?;
        let path = m.filter(y)?;
        let k = path.len() - 1;
        Ok((path.q[k], Some(path.e[k]), "CAESAR".into()))
    } else if model_json.get("variant").is_some() {
        let m: GasModel = serde_json::from_value(model_json.clone())?;
        let path = m.filter(y)?;
        let k = path.len() - 1;
        let name = if matches!(m, GasModel::One { .. }) {
            "GAS1"
        } else {
            "GAS2"
        };
        Ok((path.q[k], Some(path.e[k]), name.into()))
    } else if model_json.get("models").is_some() {
        let m: KCaviarModel = serde_json::from_value(model_json.clone())?;
        let path = m.paths(y)?;
        let k = path.len() - 1;
        Ok((path.q[k], Some(path.e[k]), "KCAVIAR".into()))
    } else if model_json.get("beta").is_some() {
        let m: CaviarModel = serde_json::from_value(model_json.clone())?;
        let path = m.filter(y)?;
        Ok((path[path.len() - 1], None, "CAVIAR".into()))
    } else {
        bail!("unrecognized model JSON shape");
    }
}

fn run_forecast(args: &ForecastArgs) -> Result<()> {
    let series = read_series_csv(&args.data.data, args.data.mode.into())?;
    let model_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&args.model)?)?;
    let (q_next, e_next, kind) = one_step(&model_json, series.values())?;
    let theta = model_json
        .get("theta")
        .or_else(|| model_json.get("params").and_then(|p| p.get("theta")))
        .cloned()
        .unwrap_or(serde_json::Value::Null);
    let out = serde_json::json!({
        "model": kind,
        "theta": theta,
        "n_observations": series.len(),
        "asof": series.dates().and_then(|d| d.last().map(|x| x.to_string())),
        "q_next": q_next,
        "e_next": e_next,
    });
    emit(&args.out, &serde_json::to_string_pretty(&out)?)
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let thetas = parse_thetas(&args.thetas)?;
    let dgps = load_dgps(&args.dgps)?;
    let bundle = run_dgp_suite(
        &dgps,
        args.n_series,
        args.length,
        args.split,
        &thetas,
        args.seed,
    )?;
    bundle.write(&args.out)?;
    eprintln!(
        "wrote {} series x {} DGPs to {}",
        args.n_series,
        dgps.len(),
        args.out.display()
    );
    Ok(())
}

/// Reads a forecast CSV; the `q`/`var` and `e`/`es` columns are matched by
/// header name, any other columns are ignored.
fn read_forecast_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |names: &[&str]| {
        headers.iter().position(|h| {
            let h = h.trim().to_ascii_lowercase();
            names.iter().any(|n| h == *n)
        })
    };
    let qi = find(&["q", "var", "q_next", "quantile"])
        .context("forecast CSV needs a `q` (or `var`) column")?;
    let ei =
        find(&["e", "es", "e_next"]).context("forecast CSV needs an `e` (or `es`) column")?;
    let mut q = Vec::new();
    let mut e = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        q.push(rec.get(qi).unwrap_or("").trim().parse::<f64>()?);
        e.push(rec.get(ei).unwrap_or("").trim().parse::<f64>()?);
    }
    Ok((q, e))
}

fn run_backtest(args: &BacktestArgs) -> Result<()> {
    let series = read_series_csv(&args.data.data, args.data.mode.into())?;
    let (q, e) = read_forecast_csv(&args.forecast)?;
    if q.len() != series.len() {
        bail!(
            "forecast rows ({}) must match return observations ({})",
            q.len(),
            series.len()
        );
    }
    let theta = ProbabilityLevel::new(args.theta)?;
    let y = series.values();
    let tests = vec![
        mnf_test(y, &q, &e, args.n_boot, args.seed)?,
        acerbi_szekely_test(y, &q, &e, ZVariant::Z1, theta, args.n_boot, args.seed + 1)?,
        acerbi_szekely_test(y, &q, &e, ZVariant::Z2, theta, args.n_boot, args.seed + 2)?,
    ];
    for t in &tests {
        eprintln!(
            "{:6} statistic {:+.4}  p {:.4}  reject@5%: {}",
            t.name, t.statistic, t.p_value, t.reject_at_5pct
        );
    }
    let out = serde_json::json!({
        "theta": args.theta,
        "n_observations": series.len(),
        "n_boot": args.n_boot,
        "seed": args.seed,
        "tests": tests,
    });
    emit(&args.out, &serde_json::to_string_pretty(&out)?)
}

fn run_evaluate(args: &EvaluateArgs) -> Result<ExitCode> {
    let opts = HarnessOptions {
        models: parse_models(&args.models)?,
        thetas: parse_thetas(&args.thetas)?,
        est: args.est.load()?,
        n_boot: args.n_boot,
        kcaviar_n: args.kcaviar_n,
        units: args.units.clone(),
        ..HarnessOptions::default()
    };
    let n_failures = if args.simulation {
        let cfg = SimStudyConfig {
            dgps: load_dgps(&args.dgps)?,
            n_series: args.n_series,
            t_len: args.length,
            split: args.split,
            seed: opts.est.seed,
            opts,
        };
        let report = run_simulation_study(&cfg)?;
        report.write(&args.out)?;
        eprintln!(
            "simulation study: {} rows, {} failures -> {}",
            report.rows.len(),
            report.failures.len(),
            args.out.display()
        );
        report.failures.len()
    } else {
        if args.data.is_empty() {
            bail!("need --data files (or --simulation)");
        }
        let mut data = Vec::new();
        for p in &args.data {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| p.display().to_string());
            let series: ReturnSeries = read_series_csv(p, args.mode.into())?;
            data.push((name, series));
        }
        let cfg = EmpiricalConfig {
            window: args.window,
            train_len: args.train_len,
            stride: args.stride,
            opts,
        };
        let report = run_empirical_evaluation(&data, &cfg)?;
        report.write(&args.out)?;
        eprintln!(
            "empirical evaluation: {} rows, {} backtests, {} failures -> {}",
            report.rows.len(),
            report.backtests.len(),
            report.failures.len(),
            args.out.display()
        );
        report.failures.len()
    };
    Ok(if n_failures > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Fit(a) => run_fit(a).map(|_| ExitCode::SUCCESS),
        Cmd::Forecast(a) => run_forecast(a).map(|_| ExitCode::SUCCESS),
        Cmd::Simulate(a) => run_simulate(a).map(|_| ExitCode::SUCCESS),
        Cmd::Backtest(a) => run_backtest(a).map(|_| ExitCode::SUCCESS),
        Cmd::Evaluate(a) => run_evaluate(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
