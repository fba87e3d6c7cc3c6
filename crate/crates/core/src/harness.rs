//! Experiment orchestration: single runs, the five-variant matrix over seeds,
//! and sweeps over the assignment-bias strength or the number of treatments.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, read_csv, split, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::matching::build_match_index;
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{save_checkpoint, train_with_index, EpochRecord, Matching, TrainConfig};
use crate::propensity::{fit_gps, write_gps_csv, GpsConfig, GpsQuality};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Tarnet,
    Multibnn,
    Pm,
    MultimbnnPs,
    Multimbnn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Tarnet,
        Variant::Multibnn,
        Variant::Pm,
        Variant::MultimbnnPs,
        Variant::Multimbnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tarnet => "tarnet",
            Variant::Multibnn => "multibnn",
            Variant::Pm => "pm",
            Variant::MultimbnnPs => "multimbnn_ps",
            Variant::Multimbnn => "multimbnn",
        }
    }

    /// (matching, balancing)
    pub fn toggles(self) -> (Matching, bool) {
        match self {
            Variant::Tarnet => (Matching::None, false),
            Variant::Multibnn => (Matching::None, true),
            Variant::Pm => (Matching::Ps, false),
            Variant::MultimbnnPs => (Matching::Ps, true),
            Variant::Multimbnn => (Matching::Gps, true),
        }
    }

    /// `base` with the variant's matching and balancing switches applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let (matching, balancing) = self.toggles();
        TrainConfig {
            matching,
            balancing,
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Synthetic generator settings, or a CSV file to load instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub kappa: f64,
    /// Seed of the generator. Fixed across runs; run seeds vary everything else.
    pub seed: u64,
    pub csv: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 15000,
            d: 10,
            k: 4,
            kappa: 10.0,
            seed: 2,
            csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub split: SplitSpec,
    pub gps: GpsConfig,
    pub train: TrainConfig,
    /// Variant for single runs.
    pub variant: Variant,
    /// Variants for the matrix and sweeps.
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            split: SplitSpec::default(),
            gps: GpsConfig::default(),
            train: TrainConfig::default(),
            variant: Variant::Multimbnn,
            variants: Variant::ALL.to_vec(),
            seeds: vec![0],
            out: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.split.validate().map_err(cfg_err)?;
        self.train.validate().map_err(cfg_err)?;
        if self.data.csv.is_none() {
            if self.data.k < 2 || self.data.d < 1 || self.data.n < 10 * self.data.k {
                return Err(Error::Config(format!(
                    "invalid dataset size n={} d={} K={}",
                    self.data.n, self.data.d, self.data.k
                )));
            }
            if !(self.data.kappa >= 0.0 && self.data.kappa.is_finite()) {
                return Err(Error::Config(format!("kappa must be finite and >= 0, got {}", self.data.kappa)));
            }
        }
        if self.gps.epochs < 1 || self.gps.batch_size < 1 || !(self.gps.lr > 0.0) {
            return Err(Error::Config("gps epochs, batch_size and lr must be positive".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        Ok(())
    }

    /// Generates or loads the dataset.
    pub fn dataset<T: Scalar>(&self) -> Result<Dataset<T>> {
        match &self.data.csv {
            Some(path) => read_csv(path, Some(self.data.k)),
            None => generate_synthetic(self.data.n, self.data.d, self.data.k, self.data.kappa, self.data.seed),
        }
    }
}

/// Output of one (variant, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub gps_quality: GpsQuality,
}

pub fn run_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join(variant.name()).join(seed.to_string())
}

/// Runs `cfg.variant` for one seed, writing artifacts under
/// `<cfg.out>/<variant>/<seed>/`.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    let ds = cfg.dataset::<T>().map_err(|e| e.in_stage("load"))?;
    run_on(&ds, cfg, cfg.variant, seed, Some(&cfg.out))
}

/// One run on a prepared dataset. With `out`, artifacts are written under
/// `<out>/<variant>/<seed>/`; metrics.json is written last.
pub fn run_on<T: Scalar>(
    ds: &Dataset<T>,
    cfg: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    out: Option<&Path>,
) -> Result<RunResult> {
    let parts = split(ds, &cfg.split, seed).map_err(|e| e.in_stage("split"))?;
    let gps_cfg = GpsConfig {
        seed,
        ..cfg.gps.clone()
    };
    let gps_model = fit_gps(&parts.gps_fit, &gps_cfg).map_err(|e| e.in_stage("fit_gps"))?;
    let gps_quality = crate::propensity::evaluate_gps(&gps_model, &parts.gps_fit).map_err(|e| e.in_stage("fit_gps"))?;
    let gps = gps_model
        .predict_dataset(&parts.train)
        .map_err(|e| e.in_stage("predict_gps"))?;

    let train_cfg = TrainConfig {
        seed,
        ..variant.apply(&cfg.train)
    };
    let index = train_cfg
        .matching
        .strategy()
        .map(|s| build_match_index(&parts.train, &gps, train_cfg.l, s))
        .transpose()
        .map_err(|e| e.in_stage("match"))?;
    let outcome = train_with_index(&parts.train, &parts.validation, index, &train_cfg).map_err(|e| e.in_stage("train"))?;
    let metrics = evaluate(&outcome.net, &parts.test).map_err(|e| e.in_stage("evaluate"))?;

    if let Some(out) = out {
        let dir = run_dir(out, variant, seed);
        let write = || -> Result<()> {
            std::fs::create_dir_all(&dir)?;
            write_gps_csv(&gps, &dir.join("gps.csv"))?;
            save_checkpoint(&outcome.net, &train_cfg, seed, &dir.join("checkpoint"))?;
            write_history_csv(&outcome.history, &dir.join("history.csv"))?;
            write_metrics_json(&metrics, &dir.join("metrics.json"))
        };
        write().map_err(|e| e.in_stage("write"))?;
    }
    Ok(RunResult {
        variant,
        seed,
        metrics,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        gps_quality,
    })
}

pub fn write_metrics_json(m: &MetricsReport, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_metrics_json(path: &Path) -> Result<MetricsReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn to_csv<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn from_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    write_atomic(path, &to_csv(history)?)
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    from_csv(path)
}

/// One row of the variant summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub n_runs: usize,
    pub sqrt_pehe_mean: f64,
    /// Absent with fewer than two runs.
    pub sqrt_pehe_std: Option<f64>,
    pub mape_ate_mean: f64,
    pub mape_ate_std: Option<f64>,
}

/// Mean and spread of one validation curve across seeds, per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub n_runs: usize,
    pub val_rmse_f_mean: f64,
    pub val_rmse_cf_mean: Option<f64>,
    pub val_rmse_cf_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub variant: Variant,
    pub seed: u64,
    pub sqrt_pehe: f64,
    pub ate_true: f64,
    pub ate_est: f64,
    pub mape_ate: f64,
    pub rmse_factual: f64,
    pub rmse_counterfactual: f64,
    pub n_eval: usize,
    pub best_epoch: usize,
}

impl From<&RunResult> for RunRow {
    fn from(r: &RunResult) -> Self {
        let m = &r.metrics;
        RunRow {
            variant: r.variant,
            seed: r.seed,
            sqrt_pehe: m.sqrt_pehe,
            ate_true: m.ate_true,
            ate_est: m.ate_est,
            mape_ate: m.mape_ate,
            rmse_factual: m.rmse_factual,
            rmse_counterfactual: m.rmse_counterfactual,
            n_eval: m.n_eval,
            best_epoch: r.best_epoch,
        }
    }
}

#[derive(Debug)]
pub struct RunFailure {
    pub variant: Variant,
    pub seed: u64,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct AggregateResult {
    /// One row per variant with at least one successful run, in config order.
    pub summary: Vec<VariantSummary>,
    pub curves: Vec<(Variant, Vec<CurvePoint>)>,
    pub runs: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
}

impl AggregateResult {
    pub fn get(&self, v: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == v)
    }
}

/// Sample mean and standard deviation (`n - 1`); the std is absent for `n < 2`.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Reduces completed runs into per-variant summaries and curves.
pub fn aggregate(variants: &[Variant], runs: Vec<RunResult>, failures: Vec<RunFailure>) -> AggregateResult {
    let mut summary = Vec::new();
    let mut curves = Vec::new();
    for &v in variants {
        let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == v).collect();
        if mine.is_empty() {
            continue;
        }
        let pehe: Vec<f64> = mine.iter().map(|r| r.metrics.sqrt_pehe).collect();
        let mape: Vec<f64> = mine.iter().map(|r| r.metrics.mape_ate).collect();
        let (sqrt_pehe_mean, sqrt_pehe_std) = mean_std(&pehe);
        let (mape_ate_mean, mape_ate_std) = mean_std(&mape);
        summary.push(VariantSummary {
            variant: v,
            n_runs: mine.len(),
            sqrt_pehe_mean,
            sqrt_pehe_std,
            mape_ate_mean,
            mape_ate_std,
        });

        let epochs = mine.iter().map(|r| r.history.len()).max().unwrap_or(0);
        let curve = (0..epochs)
            .map(|e| {
                let recs: Vec<&EpochRecord> = mine.iter().filter_map(|r| r.history.get(e)).collect();
                let f: Vec<f64> = recs.iter().map(|r| r.val_rmse_f).collect();
                let cf: Vec<f64> = recs.iter().filter_map(|r| r.val_rmse_cf).collect();
                let (cf_mean, cf_std) = if cf.is_empty() {
                    (None, None)
                } else {
                    let (m, s) = mean_std(&cf);
                    (Some(m), s)
                };
                CurvePoint {
                    epoch: e,
                    n_runs: recs.len(),
                    val_rmse_f_mean: mean_std(&f).0,
                    val_rmse_cf_mean: cf_mean,
                    val_rmse_cf_std: cf_std,
                }
            })
            .collect();
        curves.push((v, curve));
    }
    AggregateResult {
        summary,
        curves,
        runs,
        failures,
    }
}

/// Runs every configured variant for every configured seed on one dataset.
/// Failed runs are logged and recorded; aggregation covers the successes.
pub fn run_matrix_on<T: Scalar>(ds: &Dataset<T>, cfg: &ExperimentConfig, out: Option<&Path>) -> AggregateResult {
    let jobs: Vec<(Variant, u64)> = cfg
        .variants
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<Result<RunResult, RunFailure>> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            run_on(ds, cfg, variant, seed, out).map_err(|error| {
                log::error!("{variant} seed {seed} failed: {error}");
                RunFailure { variant, seed, error }
            })
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(run) => runs.push(run),
            Err(f) => failures.push(f),
        }
    }
    aggregate(&cfg.variants, runs, failures)
}

/// Writes `summary.csv`, `runs.csv` and `curves/<variant>.csv` under `out`.
pub fn write_aggregate(agg: &AggregateResult, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out.join("curves"))?;
    write_atomic(&out.join("summary.csv"), &to_csv(&agg.summary)?)?;
    let rows: Vec<RunRow> = agg.runs.iter().map(RunRow::from).collect();
    write_atomic(&out.join("runs.csv"), &to_csv(&rows)?)?;
    for (v, curve) in &agg.curves {
        write_atomic(&out.join("curves").join(format!("{v}.csv")), &to_csv(curve)?)?;
    }
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<VariantSummary>> {
    from_csv(path)
}

/// The five-variant matrix over `cfg.seeds`, with all outputs under `cfg.out`.
pub fn run_matrix<T: Scalar>(cfg: &ExperimentConfig) -> Result<AggregateResult> {
    cfg.validate()?;
    let ds = cfg.dataset::<T>().map_err(|e| e.in_stage("load"))?;
    let agg = run_matrix_on(&ds, cfg, Some(&cfg.out));
    write_aggregate(&agg, &cfg.out).map_err(|e| e.in_stage("write"))?;
    Ok(agg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Kappa,
    K,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Kappa => "kappa",
            SweepAxis::K => "K",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepAxis::Kappa => vec![0.0, 1.0, 2.0, 5.0, 10.0],
            SweepAxis::K => vec![2.0, 4.0, 6.0, 8.0],
        }
    }

    fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Kappa => cfg.data.kappa = value,
            SweepAxis::K => {
                if value.fract() != 0.0 || value < 2.0 {
                    return Err(Error::Config(format!("K grid values must be integers >= 2, got {value}")));
                }
                cfg.data.k = value as usize;
            }
        }
        if cfg.data.csv.is_some() {
            return Err(Error::Config("sweeps need a synthetic dataset".into()));
        }
        cfg.out = base.out.join(format!("{}={value}", self.name()));
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kappa" => Ok(SweepAxis::Kappa),
            "K" | "k" => Ok(SweepAxis::K),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}`"))),
        }
    }
}

/// One long-format row: (axis value, variant, metric) -> mean, std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub variant: Variant,
    pub metric: String,
    pub mean: f64,
    pub std: Option<f64>,
}

#[derive(Debug)]
pub struct SweepResult {
    pub points: Vec<(f64, AggregateResult)>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn failures(&self) -> usize {
        self.points.iter().map(|(_, a)| a.failures.len()).sum()
    }
}

/// Runs the matrix at every grid point. Each point writes its own outputs to
/// `<out>/<axis>=<value>/`; the long table goes to `<out>/summary.csv`.
pub fn run_sweep<T: Scalar>(axis: SweepAxis, grid: &[f64], base: &ExperimentConfig) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    base.validate()?;
    let mut points = Vec::with_capacity(grid.len());
    let mut rows = Vec::new();
    for &value in grid {
        let cfg = axis.apply(base, value)?;
        log::info!("sweep {}={value}", axis.name());
        let agg = run_matrix::<T>(&cfg)?;
        for s in &agg.summary {
            for (metric, mean, std) in [
                ("sqrt_pehe", s.sqrt_pehe_mean, s.sqrt_pehe_std),
                ("mape_ate", s.mape_ate_mean, s.mape_ate_std),
            ] {
                rows.push(SweepRow {
                    axis: axis.name().into(),
                    value,
                    variant: s.variant,
                    metric: metric.into(),
                    mean,
                    std,
                });
            }
        }
        points.push((value, agg));
    }
    std::fs::create_dir_all(&base.out)?;
    write_atomic(&base.out.join("summary.csv"), &to_csv(&rows)?).map_err(|e| e.in_stage("write"))?;
    Ok(SweepResult { points, rows })
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    from_csv(path)
}
