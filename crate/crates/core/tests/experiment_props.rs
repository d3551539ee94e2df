mod common;

use common::*;
use qosgraph::experiment::{self, ExperimentConfig, ModelKind, QosPredictor, RunReport};
use qosgraph::training::TrainingConfig;
use serde_json::Value;

fn quick_training() -> TrainingConfig {
    TrainingConfig {
        epochs: 3,
        embed_dim: 4,
        heads: 2,
        predictor_hidden: 8,
        batch_size: 16,
        ..TrainingConfig::default()
    }
}

fn small_run(dir: &std::path::Path) -> (ExperimentConfig, RunReport) {
    let mut cfg = write_synthetic_dataset(dir, 12, 10, 5);
    cfg.densities = vec![0.5];
    cfg.models = vec![ModelKind::Qosmgaa, ModelKind::Upcc, ModelKind::Pmf];
    cfg.seeds = vec![1, 2, 3];
    cfg.training = quick_training();
    cfg.pmf.epochs = 20;
    cfg.inference_pairs = 20;
    cfg.save_checkpoints = true;
    let report = experiment::run_experiment(&cfg).unwrap();
    (cfg, report)
}

/// Every `required` key listed in the schema exists in `value`, recursively.
fn check_required(schema: &Value, value: &Value, path: &str) {
    if let Some(req) = schema.get("required").and_then(Value::as_array) {
        for k in req {
            let k = k.as_str().unwrap();
            assert!(value.get(k).is_some(), "{path}: missing `{k}`");
        }
    }
    if let Some(props) = schema.get("properties").and_then(Value::as_object) {
        for (k, sub) in props {
            if let Some(v) = value.get(k) {
                check_required(sub, v, &format!("{path}.{k}"));
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), value.as_array()) {
        for (i, v) in arr.iter().enumerate() {
            check_required(items, v, &format!("{path}[{i}]"));
        }
    }
}

#[test]
fn grid_run_produces_rows_aggregates_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, report) = small_run(dir.path());
    assert_eq!(report.runs.len(), 9);
    assert_eq!(report.aggregates.len(), 3);
    for agg in &report.aggregates {
        let rows: Vec<_> = report.runs.iter().filter(|r| r.model == agg.model).collect();
        assert_eq!(rows.len(), 3);
        assert_eq!(agg.runs, 3);
        let mean = rows.iter().map(|r| r.mae).sum::<f64>() / 3.0;
        assert!((agg.mae_mean - mean).abs() < 1e-12);
        let var = rows.iter().map(|r| (r.mae - mean).powi(2)).sum::<f64>() / 2.0;
        assert!((agg.mae_std.unwrap() - var.sqrt()).abs() < 1e-12);
    }
    for r in &report.runs {
        assert!(r.mae.is_finite() && r.rmse >= r.mae);
        assert!(r.inference_seconds > 0.0);
        match r.model {
            ModelKind::Upcc => {
                assert!(r.train_seconds.is_none() && r.epochs_run.is_none() && r.best_epoch.is_none());
            }
            ModelKind::Qosmgaa => {
                assert!(r.history.as_ref().unwrap().exists());
                assert!(r.best_epoch.unwrap() <= r.epochs_run.unwrap());
            }
            ModelKind::Pmf => assert_eq!(r.epochs_run, Some(20)),
            _ => unreachable!(),
        }
    }
    for f in ["config.json", "metrics.csv", "report.json", "plot_density.csv", "plot_noise.csv"] {
        assert!(cfg.out.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(cfg.out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
    let ckpts = std::fs::read_dir(cfg.out.join("checkpoints")).unwrap().count();
    assert_eq!(ckpts, 3);
    assert!(report.memory.as_ref().unwrap().total_bytes > 0);
}

#[test]
fn report_json_satisfies_schema() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = small_run(dir.path());
    let schema: Value = serde_json::from_str(experiment::REPORT_SCHEMA).unwrap();
    let text = std::fs::read_to_string(cfg.out.join("report.json")).unwrap();
    let report: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["schema_version"], experiment::REPORT_SCHEMA_VERSION);
    check_required(&schema, &report, "report");
    let upcc = report["runs"].as_array().unwrap().iter().find(|r| r["model"] == "upcc").unwrap();
    assert!(upcc.get("train_seconds").is_none());
    let back: RunReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back.runs.len(), 9);
}

#[test]
fn runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = write_synthetic_dataset(dir.path(), 10, 8, 2);
    cfg.densities = vec![0.6];
    cfg.models = vec![ModelKind::Qosmgaa, ModelKind::Uipcc];
    cfg.seeds = vec![4];
    cfg.training = quick_training();
    cfg.inference_pairs = 5;
    let a = experiment::run_experiment(&cfg).unwrap();
    let b = experiment::run_experiment(&cfg).unwrap();
    let key = |r: &RunReport| r.runs.iter().map(|x| (x.mae.to_bits(), x.rmse.to_bits())).collect::<Vec<_>>();
    assert_eq!(key(&a), key(&b));
}

#[test]
fn noisy_graph_runs_fill_the_noise_plot() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = write_synthetic_dataset(dir.path(), 10, 8, 3);
    cfg.densities = vec![0.5];
    cfg.models = vec![ModelKind::Qosmgaa, ModelKind::Ipcc];
    cfg.noise_ratios = vec![0.0, 0.2];
    cfg.seeds = vec![1];
    cfg.training = quick_training();
    cfg.inference_pairs = 5;
    let report = experiment::run_experiment(&cfg).unwrap();
    assert_eq!(report.runs.len(), 4);
    // Neighborhood CF ignores the graphs.
    let ipcc: Vec<_> = report.runs.iter().filter(|r| r.model == ModelKind::Ipcc).collect();
    assert_eq!(ipcc[0].mae, ipcc[1].mae);
    let plot = std::fs::read_to_string(cfg.out.join("plot_noise.csv")).unwrap();
    let lines: Vec<_> = plot.lines().collect();
    assert_eq!(lines[0], "noise_ratio,qosmgaa_mae,qosmgaa_rmse,ipcc_mae,ipcc_rmse");
    assert_eq!(lines.len(), 3);
}

#[test]
fn failing_cell_keeps_finished_rows_and_names_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = write_synthetic_dataset(dir.path(), 6, 5, 4);
    cfg.densities = vec![0.5];
    cfg.models = vec![ModelKind::Upcc, ModelKind::Qosmgaa];
    cfg.seeds = vec![1];
    cfg.training = quick_training();
    // The validation carve leaves one fit triple, too few for batch statistics.
    cfg.val_frac = 0.999;
    cfg.inference_pairs = 5;
    let err = experiment::run_experiment(&cfg).err().unwrap();
    let msg = err.to_string();
    assert!(msg.contains("model qosmgaa") && msg.contains("seed 1"), "{msg}");
    let csv = std::fs::read_to_string(cfg.out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

struct Stub(Vec<f64>);

impl QosPredictor for Stub {
    fn predict(&self, user: usize, service: usize) -> f64 {
        self.0.iter().map(|v| v * (user + service) as f64).sum()
    }
}

#[test]
fn inference_timing_is_median_of_per_pair_passes() {
    let stub = Stub((0..64).map(|i| i as f64 * 0.01).collect());
    let pairs: Vec<(usize, usize)> = (0..5000).map(|i| (i % 37, i % 11)).collect();
    let t = experiment::measure_inference(&stub, &pairs, 7).unwrap();
    assert_eq!(t.samples.len(), 7);
    assert_eq!(t.seconds_per_pair, experiment::median(&t.samples));
    assert!(t.seconds_per_pair > 0.0 && t.seconds_per_pair < 1e-3);
    let n = t.samples.len() as f64;
    let mean = t.samples.iter().sum::<f64>() / n;
    let sd = (t.samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(sd / mean < 0.5, "coefficient of variation {}", sd / mean);
    assert!(experiment::measure_inference(&stub, &pairs, 2).is_err());
    assert!(experiment::measure_inference(&stub, &[], 3).is_err());
}

#[test]
fn embedding_memory_is_linear_in_dimension() {
    let at = |d: usize| {
        let cfg = TrainingConfig { embed_dim: d, ..TrainingConfig::default() };
        experiment::estimate_memory_for(&cfg, 100, 200, 4).unwrap()
    };
    let table = |r: &experiment::MemoryReport, name: &str| r.modules.iter().find(|m| m.module == name).unwrap().bytes;
    for d in [8, 16, 32, 64] {
        let r = at(d);
        assert_eq!(table(&r, "user_embeddings"), 100 * d * 4);
        assert_eq!(table(&r, "service_embeddings"), 200 * d * 4);
        assert_eq!(r.total_bytes, r.modules.iter().map(|m| m.bytes).sum::<usize>());
        assert_eq!(r.total_bytes, r.total_params * 4);
    }
    assert!(at(16).total_bytes < at(32).total_bytes);
    // Half-width scalars halve every figure.
    let cfg = TrainingConfig::default();
    let full = experiment::estimate_memory_for(&cfg, 50, 50, 4).unwrap();
    let half = experiment::estimate_memory_for(&cfg, 50, 50, 2).unwrap();
    assert_eq!(full.total_bytes, 2 * half.total_bytes);
}

#[test]
fn missing_dataset_is_an_io_error() {
    let cfg = ExperimentConfig {
        dataset: "/nonexistent/qos.csv".into(),
        format: qosgraph::dataset::MatrixFormat::TripleCsv,
        ..ExperimentConfig::default()
    };
    let err = experiment::run_experiment(&cfg).err().unwrap();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn invalid_grid_is_a_config_error() {
    let mut cfg = ExperimentConfig::default();
    cfg.seeds.clear();
    assert_eq!(experiment::run_experiment(&cfg).err().unwrap().exit_code(), 2);
}
