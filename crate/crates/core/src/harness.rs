//! End-to-end experiment runners: the simulation study against GARCH ground
//! truth and the rolling block-fold evaluation on market data, with metric
//! aggregation, backtest batteries, model-comparison tables, and CSV/JSON
//! report writers.
//!
//! Both runners share the same per-cell discipline: models are fitted on
//! the training segment only (the fit API never sees test data), the fitted
//! recursion is then rolled across the whole window one step ahead, and the
//! test segment is scored. Every row carries provenance (model JSON hash,
//! config hash, seed): re-running with equal hashes reproduces identical
//! numbers. Per-cell failures are recorded, never fatal.
//!
//! Conventions mirrored from the evaluation protocol:
//! - the quantile-only model scores ES metrics with its VaR path as a
//!   degenerate ES proxy;
//! - GAS rows whose filtered path range exceeds `gas_instability_factor`
//!   times the window's return range are excluded from loss averages (the
//!   exclusions are counted per cell);
//! - aggregate competitor means outside the lead model's mean ± 1 sd across
//!   folds carry a star flag.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

use crate::backtest::{
    acerbi_szekely_test, dm_test, encompassing_test, loss_difference_test, mnf_test,
    nadeau_bengio_test, violation_set, TestReport, ZVariant,
};
use crate::caesar::caesar_fit;
use crate::caviar::{caviar_fit, CaviarSpec};
use crate::error::{Error, Result};
use crate::gas::{gas_fit, GasVariant};
use crate::kquantile::kcaviar_fit;
use crate::losses;
use crate::series::{
    make_block_folds, EstimationConfig, ForecastPath, ProbabilityLevel, ReturnSeries,
};
use crate::simulate::{run_dgp_suite, DatasetBundle, DgpSpec};

/// The model zoo of the evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModelKind {
    Caesar,
    Caviar,
    KCaviar,
    Gas1,
    Gas2,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Caesar,
        ModelKind::Caviar,
        ModelKind::KCaviar,
        ModelKind::Gas1,
        ModelKind::Gas2,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Caesar => "CAESAR",
            ModelKind::Caviar => "CAVIAR",
            ModelKind::KCaviar => "KCAVIAR",
            ModelKind::Gas1 => "GAS1",
            ModelKind::Gas2 => "GAS2",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['-', '_'], "").as_str() {
            "CAESAR" => Ok(ModelKind::Caesar),
            "CAVIAR" => Ok(ModelKind::Caviar),
            "KCAVIAR" => Ok(ModelKind::KCaviar),
            "GAS1" => Ok(ModelKind::Gas1),
            "GAS2" => Ok(ModelKind::Gas2),
            other => Err(Error::input(format!("unknown model `{other}`"))),
        }
    }
}

/// Knobs shared by both runners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessOptions {
    pub models: Vec<ModelKind>,
    pub thetas: Vec<f64>,
    pub est: EstimationConfig,
    pub spec: CaviarSpec,
    pub n_boot: u32,
    pub kcaviar_n: usize,
    /// GAS exclusion rule: path range > factor × return range.
    pub gas_instability_factor: f64,
    /// Unit convention of the input returns, echoed into every report.
    pub units: String,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        HarnessOptions {
            models: ModelKind::ALL.to_vec(),
            thetas: vec![0.05, 0.025, 0.01],
            est: EstimationConfig::default(),
            spec: CaviarSpec::as11(),
            n_boot: 10_000,
            kcaviar_n: 10,
            gas_instability_factor: 10.0,
            units: "raw".into(),
        }
    }
}

impl HarnessOptions {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.thetas.is_empty() {
            return Err(Error::input("need at least one model and one theta"));
        }
        for &t in &self.thetas {
            ProbabilityLevel::new(t)?;
        }
        self.est.validate()
    }
}

/// Simulation-study protocol parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStudyConfig {
    pub dgps: Vec<DgpSpec>,
    pub n_series: usize,
    pub t_len: usize,
    pub split: usize,
    /// Master seed for data generation.
    pub seed: u64,
    pub opts: HarnessOptions,
}

impl Default for SimStudyConfig {
    fn default() -> Self {
        SimStudyConfig {
            dgps: crate::simulate::default_dgp_suite(),
            n_series: 20,
            t_len: 1750,
            split: 1500,
            seed: 0,
            opts: HarnessOptions::default(),
        }
    }
}

/// Rolling-fold protocol parameters for market data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalConfig {
    pub window: usize,
    pub train_len: usize,
    pub stride: usize,
    pub opts: HarnessOptions,
}

impl Default for EmpiricalConfig {
    fn default() -> Self {
        // 7y windows, 6y train, 1y stride at 252 obs/year.
        EmpiricalConfig {
            window: 1764,
            train_len: 1512,
            stride: 252,
            opts: HarnessOptions::default(),
        }
    }
}

/// Test-segment metrics of one fitted model on one fold/series.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub l_b: Option<f64>,
    pub l_p: Option<f64>,
    pub pinball: Option<f64>,
    pub violation_rate: f64,
    /// Share of test times with ê_t > q̂_t.
    pub crossing_rate: f64,
    /// Excluded from loss averages by the GAS instability rule.
    pub excluded: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// One evaluated (dataset, unit, model, theta) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub dataset: String,
    /// Series index (simulation) or fold index (empirical).
    pub unit: usize,
    pub model: ModelKind,
    pub theta: f64,
    pub metrics: Metrics,
    pub model_hash: String,
    pub seed: u64,
}

/// Aggregate over units of one (dataset, model, theta) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub dataset: String,
    pub model: ModelKind,
    pub theta: f64,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub l_b: Option<f64>,
    pub l_p: Option<f64>,
    pub pinball: Option<f64>,
    pub l_b_sd: Option<f64>,
    pub l_p_sd: Option<f64>,
    pub n_units: usize,
    pub n_included: usize,
    pub n_excluded: usize,
    pub n_failed: usize,
    /// Mean |true ES| over the test segments (simulation cells only).
    pub mean_abs_true_es: Option<f64>,
    /// Star flags: mean loss outside the lead model's mean ± 1 sd.
    pub star_l_b: Option<bool>,
    pub star_l_p: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub dataset: String,
    pub unit: usize,
    pub model: ModelKind,
    pub theta: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: SimStudyConfig,
    pub config_hash: String,
    pub rows: Vec<EvaluationRow>,
    pub cells: Vec<AggregateCell>,
    pub failures: Vec<CellFailure>,
}

/// One direct backtest outcome on one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestRow {
    pub dataset: String,
    pub fold: usize,
    pub theta: f64,
    pub model: ModelKind,
    pub report: TestReport,
}

/// One model-comparison outcome (fold-level, or asset-level when `fold` is
/// absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub fold: Option<usize>,
    pub theta: f64,
    pub competitor: ModelKind,
    pub test: String,
    pub report: TestReport,
    /// On rejection: did the lead model win?
    pub lead_better: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRatio {
    pub model: ModelKind,
    pub theta: f64,
    pub test: String,
    pub n_tests: usize,
    pub n_rejections: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmCount {
    pub theta: f64,
    pub loss: String,
    pub competitor: ModelKind,
    pub lead_wins: usize,
    pub competitor_wins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinballDiff {
    pub theta: f64,
    pub dataset: String,
    pub fold: usize,
    pub competitor: ModelKind,
    /// competitor pinball minus lead pinball; positive favours the lead.
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalReport {
    pub config: EmpiricalConfig,
    pub config_hash: String,
    pub rows: Vec<EvaluationRow>,
    pub cells: Vec<AggregateCell>,
    pub backtests: Vec<BacktestRow>,
    pub comparisons: Vec<ComparisonRow>,
    pub rejection_ratios: Vec<RejectionRatio>,
    pub dm_counts: Vec<DmCount>,
    pub pinball_diffs: Vec<PinballDiff>,
    pub failures: Vec<CellFailure>,
}

/// Mean absolute error and root mean squared error over aligned paths.
pub fn mae_rmse(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::input(format!(
            "mae_rmse: length mismatch ({} vs {})",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::input("mae_rmse: empty paths"));
    }
    let n = pred.len() as f64;
    let mae = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n;
    let mse = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    Ok((mae, mse.sqrt()))
}

fn sha256_hex(payload: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(payload.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_string(value)?))
}

fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(base, |acc, t| {
        acc.wrapping_mul(6364136223846793005)
            .wrapping_add(t.wrapping_add(1442695040888963407))
    })
}

/// One fitted model rolled across its fold window.
pub struct FittedForecast {
    /// Absent when a fitted GAS recursion diverged inside the window: the
    /// series is then excluded from loss averages rather than failed.
    pub path: Option<ForecastPath>,
    pub model_json: serde_json::Value,
    pub unstable: bool,
    pub degenerate: bool,
}

/// Fits `kind` on the first `train_len` observations of `window` and rolls
/// the fitted recursion across the whole window.
pub fn fit_and_filter(
    kind: ModelKind,
    window: &[f64],
    train_len: usize,
    theta: ProbabilityLevel,
    opts: &HarnessOptions,
) -> Result<FittedForecast> {
    let series = ReturnSeries::new(window.to_vec())?;
    let train = 0..train_len;
    match kind {
        ModelKind::Caviar => {
            let m = caviar_fit(&series, theta, opts.spec, &opts.est, train)?;
            let q = m.filter(window)?;
            // The quantile path stands in for the missing ES path.
            let path = ForecastPath::new(q.clone(), q, theta)?;
            Ok(FittedForecast {
                path: Some(path),
                model_json: serde_json::to_value(&m)?,
                unstable: false,
                degenerate: m.degenerate,
            })
        }
        ModelKind::Caesar => {
            let m = caesar_fit(&series, theta, opts.spec, &opts.est, train)?;
            let path = m.filter(window)?;
            Ok(FittedForecast {
                path: Some(path),
                model_json: serde_json::to_value(&m)?,
                unstable: false,
                degenerate: m.degenerate,
            })
        }
        ModelKind::KCaviar => {
            let m = kcaviar_fit(&series, theta, opts.kcaviar_n, opts.spec, &opts.est, train)?;
            let path = m.paths(window)?;
            Ok(FittedForecast {
                path: Some(path),
                model_json: serde_json::to_value(&m)?,
                unstable: false,
                degenerate: m.models.iter().any(|sub| sub.degenerate),
            })
        }
        ModelKind::Gas1 | ModelKind::Gas2 => {
            let variant = if kind == ModelKind::Gas1 {
                GasVariant::One
            } else {
                GasVariant::Two
            };
            let m = gas_fit(&series, theta, variant, &opts.est, train)?;
            // A stable in-sample fit can still explode further out; that is
            // the instability the exclusion rule is about, not a failure.
            let path = match m.filter(window) {
                Ok(p) => Some(p),
                Err(Error::Divergence(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(FittedForecast {
                path,
                model_json: serde_json::to_value(&m)?,
                unstable: m.unstable(),
                degenerate: m.degenerate(),
            })
        }
    }
}

/// Row recorded for a GAS filter that diverged inside the window.
fn diverged_metrics() -> Metrics {
    Metrics {
        excluded: true,
        flags: vec!["gas_diverged".into()],
        ..Metrics::default()
    }
}

fn range_of(values: impl Iterator<Item = f64>) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo.is_finite() && hi.is_finite() {
        hi - lo
    } else {
        f64::INFINITY
    }
}

/// Forecasts in force over a test range: `path[k]` predicts observation
/// k+1, so the slice for observations `test` starts one step earlier.
fn forecast_slice<'a>(path: &'a [f64], test: &std::ops::Range<usize>) -> &'a [f64] {
    &path[test.start - 1..test.end - 1]
}

/// Scores the test segment of a rolled path.
fn score_segment(
    path: &ForecastPath,
    y: &[f64],
    test: std::ops::Range<usize>,
    theta: ProbabilityLevel,
    truth_e: Option<&[f64]>,
) -> Result<Metrics> {
    let q = forecast_slice(&path.q, &test);
    let e = forecast_slice(&path.e, &test);
    let yt = &y[test.clone()];
    let n = yt.len() as f64;
    let mut flags = Vec::new();

    let (mae, rmse) = match truth_e {
        Some(truth) => {
            let (m, r) = mae_rmse(e, truth)?;
            (Some(m), Some(r))
        }
        None => (None, None),
    };
    let r_path: Vec<f64> = e.iter().zip(q).map(|(e, q)| e - q).collect();
    let l_b = Some(losses::barrera_mean(&r_path, yt, q, theta)?);
    let l_p = match losses::patton_mean(e, q, yt, theta) {
        Ok(v) => Some(v),
        Err(Error::Domain(_)) => {
            flags.push("patton_domain".into());
            None
        }
        Err(e) => return Err(e),
    };
    let pinball = Some(losses::pinball_mean(q, yt, theta)?);
    let violation_rate = violation_set(yt, q).len() as f64 / n;
    let crossing_rate = q.iter().zip(e).filter(|(q, e)| e > q).count() as f64 / n;
    Ok(Metrics {
        mae,
        rmse,
        l_b,
        l_p,
        pinball,
        violation_rate,
        crossing_rate,
        excluded: false,
        flags,
    })
}

fn apply_gas_exclusion(
    metrics: &mut Metrics,
    kind: ModelKind,
    fit_unstable: bool,
    path: &ForecastPath,
    window: &[f64],
    factor: f64,
) {
    if !matches!(kind, ModelKind::Gas1 | ModelKind::Gas2) {
        return;
    }
    let path_range = range_of(path.q.iter().chain(&path.e).copied());
    let data_range = range_of(window.iter().copied());
    if fit_unstable || path_range > factor * data_range {
        metrics.excluded = true;
        metrics.flags.push("gas_unstable".into());
    }
}

fn mean_opt(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn sd_opt(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.len() < 2 {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    Some((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt())
}

fn aggregate_cells(
    rows: &[EvaluationRow],
    failures: &[CellFailure],
    datasets: &[String],
    opts: &HarnessOptions,
    truth_means: &BTreeMap<(String, String), f64>,
) -> Vec<AggregateCell> {
    let mut cells = Vec::new();
    for dataset in datasets {
        for &theta in &opts.thetas {
            for &model in &opts.models {
                let sel: Vec<&EvaluationRow> = rows
                    .iter()
                    .filter(|r| {
                        r.dataset == *dataset && r.model == model && r.theta == theta
                    })
                    .collect();
                let included: Vec<&&EvaluationRow> =
                    sel.iter().filter(|r| !r.metrics.excluded).collect();
                let n_failed = failures
                    .iter()
                    .filter(|f| f.dataset == *dataset && f.model == model && f.theta == theta)
                    .count();
                let key = (dataset.clone(), format!("{theta}"));
                cells.push(AggregateCell {
                    dataset: dataset.clone(),
                    model,
                    theta,
                    mae: mean_opt(included.iter().filter_map(|r| r.metrics.mae)),
                    rmse: mean_opt(included.iter().filter_map(|r| r.metrics.rmse)),
                    l_b: mean_opt(included.iter().filter_map(|r| r.metrics.l_b)),
                    l_p: mean_opt(included.iter().filter_map(|r| r.metrics.l_p)),
                    pinball: mean_opt(included.iter().filter_map(|r| r.metrics.pinball)),
                    l_b_sd: sd_opt(included.iter().filter_map(|r| r.metrics.l_b)),
                    l_p_sd: sd_opt(included.iter().filter_map(|r| r.metrics.l_p)),
                    n_units: sel.len() + n_failed,
                    n_included: included.len(),
                    n_excluded: sel.len() - included.len(),
                    n_failed,
                    mean_abs_true_es: truth_means.get(&key).copied(),
                    star_l_b: None,
                    star_l_p: None,
                })
            }
        }
    }
    flag_outside_lead_band(&mut cells);
    cells
}

/// Star flags: a competitor's mean loss lies outside the lead model's mean
/// ± 1 sd (sd across units) in the same (dataset, theta) block.
fn flag_outside_lead_band(cells: &mut [AggregateCell]) {
    struct LeadBand {
        dataset: String,
        theta: f64,
        l_b: Option<f64>,
        l_b_sd: Option<f64>,
        l_p: Option<f64>,
        l_p_sd: Option<f64>,
    }
    let lead: Vec<LeadBand> = cells
        .iter()
        .filter(|c| c.model == ModelKind::Caesar)
        .map(|c| LeadBand {
            dataset: c.dataset.clone(),
            theta: c.theta,
            l_b: c.l_b,
            l_b_sd: c.l_b_sd,
            l_p: c.l_p,
            l_p_sd: c.l_p_sd,
        })
        .collect();
    for cell in cells.iter_mut() {
        if cell.model == ModelKind::Caesar {
            continue;
        }
        if let Some(band) = lead
            .iter()
            .find(|b| b.dataset == cell.dataset && b.theta == cell.theta)
        {
            if let (Some(mean), Some(center), Some(sd)) = (cell.l_b, band.l_b, band.l_b_sd) {
                cell.star_l_b = Some((mean - center).abs() > sd);
            }
            if let (Some(mean), Some(center), Some(sd)) = (cell.l_p, band.l_p, band.l_p_sd) {
                cell.star_l_p = Some((mean - center).abs() > sd);
            }
        }
    }
}

/// Runs the simulation study: fits every model on every simulated series
/// and scores the test segment against the analytic ground truth.
pub fn run_simulation_study(cfg: &SimStudyConfig) -> Result<SimulationReport> {
    cfg.opts.validate()?;
    let bundle = run_dgp_suite(
        &cfg.dgps,
        cfg.n_series,
        cfg.t_len,
        cfg.split,
        &cfg.opts.thetas,
        cfg.seed,
    )?;
    let report = evaluate_bundle(cfg, &bundle)?;
    Ok(report)
}

/// Scores an already-simulated bundle (exposed so callers can reuse one
/// bundle across configurations).
pub fn evaluate_bundle(cfg: &SimStudyConfig, bundle: &DatasetBundle) -> Result<SimulationReport> {
    cfg.opts.validate()?;
    let opts = &cfg.opts;
    let split = bundle.split;
    let t_len = bundle.t_len;
    let tasks: Vec<(usize, usize)> = (0..bundle.dgps.len())
        .flat_map(|d| (0..bundle.dgps[d].series.len()).map(move |s| (d, s)))
        .collect();

    let per_task: Vec<(Vec<EvaluationRow>, Vec<CellFailure>)> = tasks
        .par_iter()
        .map(|&(d, s)| {
            let dgp = &bundle.dgps[d];
            let series = &dgp.series[s];
            let mut rows = Vec::new();
            let mut failures = Vec::new();
            for (ti, &theta_v) in opts.thetas.iter().enumerate() {
                let theta = ProbabilityLevel::new(theta_v).expect("validated");
                for &model in &opts.models {
                    match fit_and_filter(model, &series.y, split, theta, opts) {
                        Ok(fitted) => {
                            let model_hash = sha256_hex(&fitted.model_json.to_string());
                            let Some(path) = &fitted.path else {
                                rows.push(EvaluationRow {
                                    dataset: dgp.spec.id.clone(),
                                    unit: s,
                                    model,
                                    theta: theta_v,
                                    metrics: diverged_metrics(),
                                    model_hash,
                                    seed: series.seed,
                                });
                                continue;
                            };
                            let truth = &series.truths[ti].e[split..t_len];
                            match score_segment(path, &series.y, split..t_len, theta, Some(truth))
                            {
                                Ok(mut metrics) => {
                                    apply_gas_exclusion(
                                        &mut metrics,
                                        model,
                                        fitted.unstable,
                                        path,
                                        &series.y,
                                        opts.gas_instability_factor,
                                    );
                                    rows.push(EvaluationRow {
                                        dataset: dgp.spec.id.clone(),
                                        unit: s,
                                        model,
                                        theta: theta_v,
                                        metrics,
                                        model_hash,
                                        seed: series.seed,
                                    });
                                }
                                Err(e) => failures.push(CellFailure {
                                    dataset: dgp.spec.id.clone(),
                                    unit: s,
                                    model,
                                    theta: theta_v,
                                    error: e.to_string(),
                                }),
                            }
                        }
                        Err(e) => failures.push(CellFailure {
                            dataset: dgp.spec.id.clone(),
                            unit: s,
                            model,
                            theta: theta_v,
                            error: e.to_string(),
                        }),
                    }
                }
            }
            (rows, failures)
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in per_task {
        rows.extend(r);
        failures.extend(f);
    }

    // Mean |true ES| per (dgp, theta) over the test segments.
    let mut truth_means: BTreeMap<(String, String), f64> = BTreeMap::new();
    for dgp in &bundle.dgps {
        for (ti, &theta_v) in bundle.thetas.iter().enumerate() {
            let m = mean_opt(dgp.series.iter().map(|s| {
                s.truths[ti].e[split..t_len]
                    .iter()
                    .map(|v| v.abs())
                    .sum::<f64>()
                    / (t_len - split) as f64
            }));
            if let Some(m) = m {
                truth_means.insert((dgp.spec.id.clone(), format!("{theta_v}")), m);
            }
        }
    }

    let datasets: Vec<String> = bundle.dgps.iter().map(|d| d.spec.id.clone()).collect();
    let cells = aggregate_cells(&rows, &failures, &datasets, opts, &truth_means);
    Ok(SimulationReport {
        config: cfg.clone(),
        config_hash: hash_json(cfg)?,
        rows,
        cells,
        failures,
    })
}

struct FoldArtifacts {
    rows: Vec<EvaluationRow>,
    backtests: Vec<BacktestRow>,
    comparisons: Vec<ComparisonRow>,
    pinball_diffs: Vec<PinballDiff>,
    failures: Vec<CellFailure>,
}

/// Runs the rolling block-fold evaluation over named return series.
pub fn run_empirical_evaluation(
    data: &[(String, ReturnSeries)],
    cfg: &EmpiricalConfig,
) -> Result<EmpiricalReport> {
    cfg.opts.validate()?;
    if data.is_empty() {
        return Err(Error::input("need at least one series"));
    }
    let opts = &cfg.opts;
    let lead = ModelKind::Caesar;

    let mut tasks: Vec<(usize, usize)> = Vec::new();
    let mut plans = Vec::new();
    for (ai, (_, series)) in data.iter().enumerate() {
        let plan = make_block_folds(series.len(), cfg.window, cfg.train_len, cfg.stride)?;
        for f in 0..plan.folds.len() {
            tasks.push((ai, f));
        }
        plans.push(plan);
    }

    let per_task: Vec<FoldArtifacts> = tasks
        .par_iter()
        .map(|&(ai, fi)| evaluate_fold(data, &plans[ai], ai, fi, cfg))
        .collect();

    let mut rows = Vec::new();
    let mut backtests = Vec::new();
    let mut comparisons = Vec::new();
    let mut pinball_diffs = Vec::new();
    let mut failures = Vec::new();
    for art in per_task {
        rows.extend(art.rows);
        backtests.extend(art.backtests);
        comparisons.extend(art.comparisons);
        pinball_diffs.extend(art.pinball_diffs);
        failures.extend(art.failures);
    }

    // Corrected resampled t-test once per (asset, theta, competitor, loss)
    // over the per-fold mean losses, paired fold by fold (folds where either
    // side is missing or excluded drop out of the pairing).
    let n_test = cfg.window - cfg.train_len;
    if opts.models.contains(&lead) {
        for (ai, (asset, _)) in data.iter().enumerate() {
            for &theta in &opts.thetas {
                for &comp in opts.models.iter().filter(|&&m| m != lead) {
                    for (loss_name, pick) in [("l_b", 0usize), ("l_p", 1usize)] {
                        let loss_of = |model: ModelKind, f: usize| -> Option<f64> {
                            rows.iter()
                                .find(|r| {
                                    r.dataset == *asset
                                        && r.unit == f
                                        && r.model == model
                                        && r.theta == theta
                                        && !r.metrics.excluded
                                })
                                .and_then(|r| if pick == 0 { r.metrics.l_b } else { r.metrics.l_p })
                        };
                        let pairs: Vec<(f64, f64)> = (0..plans[ai].folds.len())
                            .filter_map(|f| Some((loss_of(lead, f)?, loss_of(comp, f)?)))
                            .collect();
                        if pairs.len() >= 2 {
                            let la: Vec<f64> = pairs.iter().map(|p| p.0).collect();
                            let lb: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                            if let Ok(rep) = nadeau_bengio_test(&la, &lb, cfg.train_len, n_test)
                            {
                                let lead_better =
                                    rep.reject_at_5pct.then_some(rep.statistic < 0.0);
                                comparisons.push(ComparisonRow {
                                    dataset: asset.clone(),
                                    fold: None,
                                    theta,
                                    competitor: comp,
                                    test: format!("nb_{loss_name}"),
                                    report: rep,
                                    lead_better,
                                });
                            }
                        }
                    }
                }
            }
        }
    }

    let datasets: Vec<String> = data.iter().map(|(a, _)| a.clone()).collect();
    let cells = aggregate_cells(&rows, &failures, &datasets, opts, &BTreeMap::new());
    let rejection_ratios = rejection_ratio_table(&backtests, opts);
    let dm_counts = dm_count_table(&comparisons, opts);

    Ok(EmpiricalReport {
        config: cfg.clone(),
        config_hash: hash_json(cfg)?,
        rows,
        cells,
        backtests,
        comparisons,
        rejection_ratios,
        dm_counts,
        pinball_diffs,
        failures,
    })
}

fn evaluate_fold(
    data: &[(String, ReturnSeries)],
    plan: &crate::series::FoldPlan,
    ai: usize,
    fi: usize,
    cfg: &EmpiricalConfig,
) -> FoldArtifacts {
    let opts = &cfg.opts;
    let lead = ModelKind::Caesar;
    let (asset, series) = &data[ai];
    let fold = &plan.folds[fi];
    let window = &series.values()[fold.window()];
    let train_len = fold.train.len();
    let test = train_len..window.len();
    let y_test = &window[test.clone()];

    let mut art = FoldArtifacts {
        rows: Vec::new(),
        backtests: Vec::new(),
        comparisons: Vec::new(),
        pinball_diffs: Vec::new(),
        failures: Vec::new(),
    };

    for (ti, &theta_v) in opts.thetas.iter().enumerate() {
        let theta = ProbabilityLevel::new(theta_v).expect("validated");
        // Fit everything first; comparisons need the lead's artifacts.
        let mut fitted: BTreeMap<ModelKind, FittedForecast> = BTreeMap::new();
        for &model in &opts.models {
            match fit_and_filter(model, window, train_len, theta, opts) {
                Ok(f) => {
                    fitted.insert(model, f);
                }
                Err(e) => art.failures.push(CellFailure {
                    dataset: asset.clone(),
                    unit: fi,
                    model,
                    theta: theta_v,
                    error: e.to_string(),
                }),
            }
        }
        for (&model, f) in &fitted {
            match score_segment(&f.path, window, test.clone(), theta, None) {
                Ok(mut metrics) => {
                    apply_gas_exclusion(&mut metrics, model, f, window, opts.gas_instability_factor);
                    art.rows.push(EvaluationRow {
                        dataset: asset.clone(),
                        unit: fi,
                        model,
                        theta: theta_v,
                        metrics,
                        model_hash: sha256_hex(&f.model_json.to_string()),
                        seed: opts.est.seed,
                    });
                }
                Err(e) => art.failures.push(CellFailure {
                    dataset: asset.clone(),
                    unit: fi,
                    model,
                    theta: theta_v,
                    error: e.to_string(),
                }),
            }
            // Direct backtests on the test segment.
            let qs = forecast_slice(&f.path.q, &test);
            let es = forecast_slice(&f.path.e, &test);
            let bt_seed = derive_seed(
                opts.est.seed,
                &[ai as u64, fi as u64, ti as u64, model as u64],
            );
            let mut push = |rep: crate::error::Result<TestReport>| match rep {
                Ok(report) => art.backtests.push(BacktestRow {
                    dataset: asset.clone(),
                    fold: fi,
                    theta: theta_v,
                    model,
                    report,
                }),
                Err(e) => art.failures.push(CellFailure {
                    dataset: asset.clone(),
                    unit: fi,
                    model,
                    theta: theta_v,
                    error: format!("backtest: {e}"),
                }),
            };
            push(mnf_test(y_test, qs, es, opts.n_boot, bt_seed));
            push(acerbi_szekely_test(
                y_test,
                qs,
                es,
                ZVariant::Z1,
                theta,
                opts.n_boot,
                bt_seed.wrapping_add(1),
            ));
            push(acerbi_szekely_test(
                y_test,
                qs,
                es,
                ZVariant::Z2,
                theta,
                opts.n_boot,
                bt_seed.wrapping_add(2),
            ));
        }

        // Pairwise comparisons against the lead model.
        let Some(lead_fit) = fitted.get(&lead) else {
            continue;
        };
        let lead_q = forecast_slice(&lead_fit.path.q, &test);
        let lead_e = forecast_slice(&lead_fit.path.e, &test);
        let lead_r: Vec<f64> = lead_e.iter().zip(lead_q).map(|(e, q)| e - q).collect();
        let lead_lb = losses::barrera_loss(&lead_r, y_test, lead_q, theta)
            .ok()
            .and_then(|l| l.per_time);
        let lead_lp = losses::patton_loss(lead_e, lead_q, y_test, theta)
            .ok()
            .and_then(|l| l.per_time);
        let lead_pinball = losses::pinball_mean(lead_q, y_test, theta).ok();

        for (&comp, f) in fitted.iter().filter(|(m, _)| **m != lead) {
            let q = forecast_slice(&f.path.q, &test);
            let e = forecast_slice(&f.path.e, &test);
            let r: Vec<f64> = e.iter().zip(q).map(|(e, q)| e - q).collect();
            let comp_lb = losses::barrera_loss(&r, y_test, q, theta)
                .ok()
                .and_then(|l| l.per_time);
            let comp_lp = losses::patton_loss(e, q, y_test, theta)
                .ok()
                .and_then(|l| l.per_time);
            let cmp_seed = derive_seed(
                opts.est.seed,
                &[99, ai as u64, fi as u64, ti as u64, comp as u64],
            );
            let mut push = |test_name: String, rep: TestReport| {
                let lead_better = rep.reject_at_5pct.then_some(rep.statistic < 0.0);
                art.comparisons.push(ComparisonRow {
                    dataset: asset.clone(),
                    fold: Some(fi),
                    theta: theta_v,
                    competitor: comp,
                    test: test_name,
                    report: rep,
                    lead_better,
                });
            };
            if let (Some(la), Some(lb)) = (&lead_lb, &comp_lb) {
                if let Ok(rep) = dm_test(la, lb, 1) {
                    push("dm_l_b".into(), rep);
                }
                if let Ok(rep) = loss_difference_test(la, lb, opts.n_boot, cmp_seed) {
                    push("ld_l_b".into(), rep);
                }
            }
            if let (Some(la), Some(lp)) = (&lead_lp, &comp_lp) {
                if let Ok(rep) = dm_test(la, lp, 1) {
                    push("dm_l_p".into(), rep);
                }
                if let Ok(rep) =
                    loss_difference_test(la, lp, opts.n_boot, cmp_seed.wrapping_add(1))
                {
                    push("ld_l_p".into(), rep);
                }
            }
            let lead_path = ForecastPath::new(lead_q.to_vec(), lead_e.to_vec(), theta)
                .expect("aligned");
            let comp_path =
                ForecastPath::new(q.to_vec(), e.to_vec(), theta).expect("aligned");
            if let Ok(rep) = encompassing_test(
                &lead_path,
                &comp_path,
                y_test,
                theta,
                opts.n_boot,
                cmp_seed.wrapping_add(2),
            ) {
                let lead_better = rep.reject_at_5pct.then_some(true);
                art.comparisons.push(ComparisonRow {
                    dataset: asset.clone(),
                    fold: Some(fi),
                    theta: theta_v,
                    competitor: comp,
                    test: "encompassing".into(),
                    report: rep,
                    lead_better,
                });
            }
            if let (Some(lead_pb), Ok(comp_pb)) =
                (lead_pinball, losses::pinball_mean(q, y_test, theta))
            {
                art.pinball_diffs.push(PinballDiff {
                    theta: theta_v,
                    dataset: asset.clone(),
                    fold: fi,
                    competitor: comp,
                    diff: comp_pb - lead_pb,
                });
            }
        }
    }
    art
}

fn rejection_ratio_table(backtests: &[BacktestRow], opts: &HarnessOptions) -> Vec<RejectionRatio> {
    let mut out = Vec::new();
    let tests = ["MNF", "AS-Z1", "AS-Z2"];
    for &model in &opts.models {
        for &theta in &opts.thetas {
            for test in tests {
                let sel: Vec<&BacktestRow> = backtests
                    .iter()
                    .filter(|b| b.model == model && b.theta == theta && b.report.name == test)
                    .collect();
                if sel.is_empty() {
                    continue;
                }
                let n_rejections = sel.iter().filter(|b| b.report.reject_at_5pct).count();
                out.push(RejectionRatio {
                    model,
                    theta,
                    test: test.to_string(),
                    n_tests: sel.len(),
                    n_rejections,
                    ratio: n_rejections as f64 / sel.len() as f64,
                });
            }
        }
    }
    out
}

fn dm_count_table(comparisons: &[ComparisonRow], opts: &HarnessOptions) -> Vec<DmCount> {
    let mut out = Vec::new();
    for &theta in &opts.thetas {
        for loss in ["l_b", "l_p"] {
            for &comp in opts.models.iter().filter(|&&m| m != ModelKind::Caesar) {
                let sel: Vec<&ComparisonRow> = comparisons
                    .iter()
                    .filter(|c| {
                        c.theta == theta
                            && c.competitor == comp
                            && c.test == format!("dm_{loss}")
                    })
                    .collect();
                if sel.is_empty() {
                    continue;
                }
                let lead_wins = sel
                    .iter()
                    .filter(|c| c.lead_better == Some(true))
                    .count();
                let competitor_wins = sel
                    .iter()
                    .filter(|c| c.lead_better == Some(false))
                    .count();
                out.push(DmCount {
                    theta,
                    loss: loss.to_string(),
                    competitor: comp,
                    lead_wins,
                    competitor_wins,
                });
            }
        }
    }
    out
}

fn opt_str(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_rows_csv(rows: &[EvaluationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "dataset", "unit", "model", "theta", "mae", "rmse", "l_b", "l_p", "pinball",
        "violation_rate", "crossing_rate", "excluded", "flags", "model_hash", "seed",
    ])?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.unit.to_string(),
            r.model.to_string(),
            r.theta.to_string(),
            opt_str(r.metrics.mae),
            opt_str(r.metrics.rmse),
            opt_str(r.metrics.l_b),
            opt_str(r.metrics.l_p),
            opt_str(r.metrics.pinball),
            r.metrics.violation_rate.to_string(),
            r.metrics.crossing_rate.to_string(),
            r.metrics.excluded.to_string(),
            r.metrics.flags.join(";"),
            r.model_hash.clone(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_cells_csv(cells: &[AggregateCell], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "dataset", "model", "theta", "mae", "rmse", "l_b", "l_p", "pinball", "l_b_sd",
        "l_p_sd", "n_units", "n_included", "n_excluded", "n_failed", "mean_abs_true_es",
        "star_l_b", "star_l_p",
    ])?;
    for c in cells {
        w.write_record([
            c.dataset.clone(),
            c.model.to_string(),
            c.theta.to_string(),
            opt_str(c.mae),
            opt_str(c.rmse),
            opt_str(c.l_b),
            opt_str(c.l_p),
            opt_str(c.pinball),
            opt_str(c.l_b_sd),
            opt_str(c.l_p_sd),
            c.n_units.to_string(),
            c.n_included.to_string(),
            c.n_excluded.to_string(),
            c.n_failed.to_string(),
            opt_str(c.mean_abs_true_es),
            c.star_l_b.map(|b| b.to_string()).unwrap_or_default(),
            c.star_l_p.map(|b| b.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

impl SimulationReport {
    /// Writes `rows.csv`, `cells.csv`, and `report.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_rows_csv(&self.rows, &dir.join("rows.csv"))?;
        write_cells_csv(&self.cells, &dir.join("cells.csv"))?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

impl EmpiricalReport {
    /// Writes the full table set plus `report.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_rows_csv(&self.rows, &dir.join("rows.csv"))?;
        write_cells_csv(&self.cells, &dir.join("cells.csv"))?;

        let mut w = csv::Writer::from_path(dir.join("backtests.csv"))?;
        w.write_record([
            "asset", "fold", "theta", "model", "test", "statistic", "p_value", "reject",
        ])?;
        for b in &self.backtests {
            w.write_record([
                b.dataset.clone(),
                b.fold.to_string(),
                b.theta.to_string(),
                b.model.to_string(),
                b.report.name.clone(),
                b.report.statistic.to_string(),
                b.report.p_value.to_string(),
                b.report.reject_at_5pct.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("comparisons.csv"))?;
        w.write_record([
            "asset", "fold", "theta", "competitor", "test", "statistic", "p_value",
            "reject", "lead_better",
        ])?;
        for c in &self.comparisons {
            w.write_record([
                c.dataset.clone(),
                c.fold.map(|f| f.to_string()).unwrap_or_default(),
                c.theta.to_string(),
                c.competitor.to_string(),
                c.test.clone(),
                c.report.statistic.to_string(),
                c.report.p_value.to_string(),
                c.report.reject_at_5pct.to_string(),
                c.lead_better.map(|b| b.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("rejection_ratios.csv"))?;
        w.write_record(["model", "theta", "test", "n_tests", "n_rejections", "ratio"])?;
        for r in &self.rejection_ratios {
            w.write_record([
                r.model.to_string(),
                r.theta.to_string(),
                r.test.clone(),
                r.n_tests.to_string(),
                r.n_rejections.to_string(),
                r.ratio.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("dm_counts.csv"))?;
        w.write_record(["theta", "loss", "competitor", "lead_wins", "competitor_wins"])?;
        for d in &self.dm_counts {
            w.write_record([
                d.theta.to_string(),
                d.loss.clone(),
                d.competitor.to_string(),
                d.lead_wins.to_string(),
                d.competitor_wins.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("pinball_diff.csv"))?;
        w.write_record(["theta", "asset", "fold", "competitor", "diff"])?;
        for p in &self.pinball_diffs {
            w.write_record([
                p.theta.to_string(),
                p.dataset.clone(),
                p.fold.to_string(),
                p.competitor.to_string(),
                p.diff.to_string(),
            ])?;
        }
        w.flush()?;

        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
