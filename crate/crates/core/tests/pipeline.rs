use std::path::Path;

use cfnet::data::{read_csv, write_csv};
use cfnet::harness::{
    read_history_csv, read_metrics_json, read_summary_csv, read_sweep_csv, run_dir, run_experiment, run_matrix,
    run_sweep, ExperimentConfig, SweepAxis, Variant,
};
use cfnet::model::{load_checkpoint, Architecture, TrainConfig};
use cfnet::nn::Activation;
use cfnet::propensity::{read_gps_csv, GpsConfig};

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.n = 500;
    cfg.data.d = 4;
    cfg.data.k = 3;
    cfg.data.kappa = 2.0;
    cfg.gps = GpsConfig {
        epochs: 30,
        ..GpsConfig::default()
    };
    cfg.train = TrainConfig {
        epochs: 6,
        batch_size: 16,
        architecture: Architecture {
            phi_hidden: vec![8],
            repr_dim: 4,
            head_hidden: vec![4],
            activation: Activation::Elu,
        },
        ..TrainConfig::default()
    };
    cfg.out = out.to_path_buf();
    cfg
}

#[test]
fn tarnet_on_randomized_data_has_inert_imbalance_and_matching() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.data.kappa = 0.0;
    cfg.variant = Variant::Tarnet;
    let base = run_experiment::<f64>(&cfg, 0).unwrap();
    assert!(base.metrics.sqrt_pehe.is_finite());
    for h in &base.history {
        // only the head-weight penalty separates the total from the factual loss
        assert!(h.train_total >= h.train_factual && h.train_total - h.train_factual < 1e-2);
    }
    cfg.train.alpha = 25.0;
    cfg.train.l = 1;
    let changed = run_experiment::<f64>(&cfg, 0).unwrap();
    assert_eq!(changed.metrics, base.metrics);
    assert_eq!(changed.history, base.history);
}

#[test]
fn repeated_run_gives_identical_metrics_json() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let cfg = tiny(&dir.path().join(name));
        run_experiment::<f64>(&cfg, 3).unwrap();
        bytes.push(std::fs::read(run_dir(&cfg.out, Variant::Multimbnn, 3).join("metrics.json")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn multimbnn_history_has_one_record_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let r = run_experiment::<f64>(&cfg, 0).unwrap();
    assert_eq!(r.history.len(), cfg.train.epochs);
    for (e, h) in r.history.iter().enumerate() {
        assert_eq!(h.epoch, e);
        assert!(h.train_total.is_finite() && h.val_rmse_f.is_finite());
        assert!(h.val_rmse_cf.is_some());
        assert!(h.train_imbalance >= 0.0);
    }
}

#[test]
fn run_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let r = run_experiment::<f64>(&cfg, 1).unwrap();
    let run = run_dir(dir.path(), Variant::Multimbnn, 1);
    assert_eq!(read_metrics_json(&run.join("metrics.json")).unwrap(), r.metrics);
    assert_eq!(read_history_csv(&run.join("history.csv")).unwrap(), r.history);

    let gps = read_gps_csv::<f64>(&run.join("gps.csv")).unwrap();
    assert_eq!(gps.len(), 250);
    assert!(gps.values().all(|p| p.k() == 3));

    // checkpoint reproduces the reported test metrics
    let (net, header) = load_checkpoint::<f64>(&run.join("checkpoint")).unwrap();
    assert_eq!(header.seed, 1);
    assert_eq!(header.config["matching"], "gps");
    let ds = cfg.dataset::<f64>().unwrap();
    let parts = cfnet::data::split(&ds, &cfg.split, 1).unwrap();
    assert_eq!(cfnet::metrics::evaluate(&net, &parts.test).unwrap(), r.metrics);

    let csv = dir.path().join("data.csv");
    write_csv(&ds, &csv).unwrap();
    assert_eq!(read_csv::<f64>(&csv, Some(3)).unwrap().samples(), ds.samples());
}

#[test]
fn matrix_over_five_seeds_has_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.seeds = (0..5).collect();
    cfg.train.epochs = 2;
    let agg = run_matrix::<f64>(&cfg).unwrap();
    assert!(agg.failures.is_empty());
    let rows = read_summary_csv(&dir.path().join("summary.csv")).unwrap();
    assert_eq!(rows, agg.summary);
    assert_eq!(rows.iter().map(|r| r.variant).collect::<Vec<_>>(), Variant::ALL.to_vec());
    assert!(rows.iter().all(|r| r.n_runs == 5 && r.sqrt_pehe_std.is_some() && r.mape_ate_std.is_some()));
    for v in Variant::ALL {
        let curve = std::fs::read_to_string(dir.path().join("curves").join(format!("{v}.csv"))).unwrap();
        assert_eq!(curve.lines().count(), 1 + cfg.train.epochs);
    }
    let runs = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 25);
}

#[test]
fn kappa_sweep_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.epochs = 1;
    let single = run_sweep::<f64>(SweepAxis::Kappa, &[0.0], &cfg).unwrap();
    assert_eq!(single.points.len(), 1);
    assert_eq!(single.points[0].1.summary.len(), 5);

    cfg.out = dir.path().join("grid");
    cfg.seeds = (0..5).collect();
    let grid = run_sweep::<f64>(SweepAxis::Kappa, &[0.0, 2.0, 5.0, 10.0], &cfg).unwrap();
    assert_eq!(grid.failures(), 0);
    let rows = read_sweep_csv(&cfg.out.join("summary.csv")).unwrap();
    assert_eq!(rows.len(), 4 * 5 * 2);
    assert_eq!(rows, grid.rows);
}

#[test]
fn k_sweep_covers_two_treatments() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.epochs = 1;
    let res = run_sweep::<f64>(SweepAxis::K, &[2.0, 4.0], &cfg).unwrap();
    assert_eq!(res.points.len(), 2);
    assert!(res.points.iter().all(|(_, a)| a.failures.is_empty()));
    let k2 = &res.points[0].1;
    assert!(k2.runs.iter().all(|r| r.metrics.n_eval > 0));
    assert!(run_sweep::<f64>(SweepAxis::K, &[2.5], &cfg).is_err());
    assert!(run_sweep::<f64>(SweepAxis::Kappa, &[], &cfg).is_err());
}

#[test]
fn f32_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let r = run_experiment::<f32>(&cfg, 0).unwrap();
    assert!(r.metrics.sqrt_pehe.is_finite());
    let (net, header) = load_checkpoint::<f32>(&run_dir(dir.path(), Variant::Multimbnn, 0).join("checkpoint")).unwrap();
    assert_eq!(header.scalar, "f32");
    assert_eq!(net.k(), 3);
}

#[test]
fn gps_fit_uses_only_its_split() {
    use cfnet::data::{generate_synthetic, split, Dataset, SplitSpec};
    use cfnet::propensity::{evaluate_gps, fit_gps};
    use std::collections::BTreeSet;

    let ds = generate_synthetic::<f64>(2000, 10, 4, 10.0, 2).unwrap();
    let parts = split(&ds, &SplitSpec::default(), 0).unwrap();
    let fit_ids: BTreeSet<u64> = parts.gps_fit.ids().into_iter().collect();
    for other in [&parts.train, &parts.validation, &parts.test] {
        assert!(other.ids().iter().all(|id| !fit_ids.contains(id)));
    }
    // a standalone copy of the fit split yields the same model
    let copy = Dataset::new(parts.gps_fit.samples().to_vec(), 10, 4).unwrap();
    let cfg = GpsConfig::default();
    let a = fit_gps(&parts.gps_fit, &cfg).unwrap();
    let b = fit_gps(&copy, &cfg).unwrap();
    assert_eq!(a.classifier(), b.classifier());
    // assignment is predictable from covariates at strong bias
    let q = evaluate_gps(&a, &parts.train).unwrap();
    assert!(q.accuracy > 0.25 + 0.05, "accuracy {}", q.accuracy);
}
