use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfnet::data::{assignment_stats, read_csv, split, write_csv};
use cfnet::harness::{
    run_experiment, run_matrix, run_sweep, write_metrics_json, ExperimentConfig, SweepAxis, Variant,
};
use cfnet::metrics::evaluate;
use cfnet::model::load_checkpoint;
use cfnet::propensity::{evaluate_gps, fit_gps, write_gps_csv, GpsConfig};
use cfnet::{Error, Result, Scalar};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cfnet", version, about = "Counterfactual regression with matched, balanced multi-head networks")]
struct Cli {
    /// Floating-point precision for all computation.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long)]
    out: PathBuf,

    /// Dataset CSV to use instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,

    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long = "treatments", short = 'k')]
    k: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    /// Seed of the synthetic generator.
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with oracle outcomes.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Generator seed (overrides the config's data seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Split, fit the GPS model and write GPS vectors for the training set.
    FitGps {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one variant end to end and write its artifacts.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate a checkpoint on a dataset with oracle outcomes.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Accepted for interface uniformity; evaluation is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// All five variants over the given seeds.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
    },
    /// The matrix over a grid of kappa or K values.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        /// `kappa` or `K`.
        #[arg(long, default_value = "kappa")]
        axis: String,
        /// Comma-separated grid; defaults to the axis' named grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.out = common.out.clone();
    if let Some(p) = &common.data {
        cfg.data.csv = Some(p.clone());
    }
    if let Some(n) = common.n {
        cfg.data.n = n;
    }
    if let Some(d) = common.d {
        cfg.data.d = d;
    }
    if let Some(k) = common.k {
        cfg.data.k = k;
    }
    if let Some(kappa) = common.kappa {
        cfg.data.kappa = kappa;
    }
    if let Some(s) = common.data_seed {
        cfg.data.seed = s;
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(value: &serde_json::Value, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    cfnet::io::write_atomic(path, text.as_bytes())
}

fn run<T: Scalar>(command: Command) -> Result<()> {
    match command {
        Command::Generate { common, seed } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            if cfg.data.csv.is_some() {
                return Err(Error::Config("generate does not take --data".into()));
            }
            let ds = cfg.dataset::<T>()?;
            std::fs::create_dir_all(&cfg.out)?;
            write_csv(&ds, &cfg.out.join("dataset.csv"))?;
            let freq = assignment_stats(&ds)?;
            write_json(
                &serde_json::json!({ "data": cfg.data, "treatment_frequencies": freq }),
                &cfg.out.join("dataset.json"),
            )?;
            println!("wrote {} samples; treatment frequencies {freq:?}", ds.len());
        }
        Command::FitGps { common, seed } => {
            let cfg = load_config(&common)?;
            let ds = cfg.dataset::<T>().map_err(|e| e.in_stage("load"))?;
            let parts = split(&ds, &cfg.split, seed).map_err(|e| e.in_stage("split"))?;
            let gps_cfg = GpsConfig {
                seed,
                ..cfg.gps.clone()
            };
            let model = fit_gps(&parts.gps_fit, &gps_cfg).map_err(|e| e.in_stage("fit_gps"))?;
            let table = model.predict_dataset(&parts.train).map_err(|e| e.in_stage("predict_gps"))?;
            let quality = evaluate_gps(&model, &parts.gps_fit)?;
            std::fs::create_dir_all(&cfg.out)?;
            write_gps_csv(&table, &cfg.out.join("gps.csv"))?;
            write_json(&serde_json::to_value(quality)?, &cfg.out.join("gps_quality.json"))?;
            if let Some(w) = &model.warning {
                log::warn!("{w}");
            }
            println!("gps log-loss {} accuracy {}", quality.log_loss, quality.accuracy);
        }
        Command::Train { common, seed, variant } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.variant = v.parse::<Variant>()?;
            }
            let r = run_experiment::<T>(&cfg, seed)?;
            println!(
                "{} seed {seed}: sqrt_pehe {} mape_ate {} (best epoch {})",
                r.variant, r.metrics.sqrt_pehe, r.metrics.mape_ate, r.best_epoch
            );
        }
        Command::Evaluate {
            common, checkpoint, ..
        } => {
            let data = common
                .data
                .as_ref()
                .ok_or_else(|| Error::Config("evaluate needs --data".into()))?;
            let (net, header) = load_checkpoint::<T>(&checkpoint).map_err(|e| e.in_stage("load"))?;
            let ds = read_csv::<T>(data, Some(header.k)).map_err(|e| e.in_stage("load"))?;
            let m = evaluate(&net, &ds).map_err(|e| e.in_stage("evaluate"))?;
            std::fs::create_dir_all(&common.out)?;
            write_metrics_json(&m, &common.out.join("metrics.json"))?;
            println!("sqrt_pehe {} mape_ate {}", m.sqrt_pehe, m.mape_ate);
        }
        Command::Bench { common, seed } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.seeds = s;
            }
            cfg.validate()?;
            let agg = run_matrix::<T>(&cfg)?;
            for s in &agg.summary {
                println!(
                    "{:13} n={} sqrt_pehe {:.4} +- {} mape_ate {:.4}",
                    s.variant.name(),
                    s.n_runs,
                    s.sqrt_pehe_mean,
                    s.sqrt_pehe_std.map_or("-".into(), |v| format!("{v:.4}")),
                    s.mape_ate_mean
                );
            }
            if !agg.failures.is_empty() {
                return Err(Error::State(format!("{} runs failed", agg.failures.len())));
            }
        }
        Command::Sweep {
            common,
            seed,
            axis,
            grid,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.seeds = s;
            }
            let axis: SweepAxis = axis.parse()?;
            let grid = grid.unwrap_or_else(|| axis.default_grid());
            let res = run_sweep::<T>(axis, &grid, &cfg)?;
            println!("{} rows written to {}", res.rows.len(), cfg.out.join("summary.csv").display());
            if res.failures() > 0 {
                return Err(Error::State(format!("{} runs failed", res.failures())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.precision {
        Precision::F32 => run::<f32>(cli.command),
        Precision::F64 => run::<f64>(cli.command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e.root(), Error::Config(_)) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
