use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hqfusion::bench::{
    accuracy_plot, emit_summary, load_records, run_benchmark, summary_table, DatasetEntry, ResultRecord, RunConfig,
    RunStatus, PLOT_Y_RANGE,
};
use hqfusion::datasets::DatasetKind;
use hqfusion::metrics::FoldMetrics;
use hqfusion::models::{ModelKind, ModelSpec};
use hqfusion::training::TrainConfig;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn smoke_config(out: &Path) -> RunConfig {
    RunConfig {
        folds: 2,
        data_dir: data_dir(),
        out_dir: out.to_path_buf(),
        train: TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        },
        datasets: vec![DatasetEntry::new(DatasetKind::Wine)],
        models: [ModelKind::Classical, ModelKind::MidfusionAttn, ModelKind::QuantumOnly]
            .into_iter()
            .map(ModelSpec::new)
            .collect(),
        ..RunConfig::default()
    }
}

fn file_map(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run_config.toml")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn smoke_run_writes_reloadable_results_quickly_and_repeatably() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let outcome = run_benchmark(&smoke_config(a.path())).unwrap();
    assert!(started.elapsed() < Duration::from_secs(60));
    assert_eq!(outcome.failed_jobs(), 0);
    assert_eq!(outcome.records.len(), 3);
    for r in &outcome.records {
        assert_eq!(r.status, RunStatus::Ok);
        assert_eq!(r.folds.len(), 2);
        assert!(r.folds.iter().all(|f| f.epochs_ran == 2));
    }

    let records = load_records(a.path()).unwrap();
    assert_eq!(records.len(), 3);
    let csv = fs::read_to_string(a.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    let history = fs::read_to_string(a.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 3 * 2 * 2);
    let saved = RunConfig::load(&a.path().join("run_config.toml")).unwrap();
    assert_eq!(saved, smoke_config(a.path()));

    run_benchmark(&smoke_config(b.path())).unwrap();
    assert_eq!(file_map(a.path()), file_map(b.path()));

    // One worker or several: the same files.
    let c = tempfile::tempdir().unwrap();
    let mut serial = smoke_config(c.path());
    serial.workers = Some(1);
    run_benchmark(&serial).unwrap();
    assert_eq!(file_map(a.path()), file_map(c.path()));
}

#[test]
fn missing_inputs_are_rejected_before_any_job() {
    let out = tempfile::tempdir().unwrap();
    let mut config = smoke_config(out.path());
    config.data_dir = out.path().join("nowhere");
    let err = run_benchmark(&config).unwrap_err();
    assert!(err.to_string().contains("wine.csv"), "{err}");
    assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0);
}

#[test]
fn unreadable_dataset_is_marked_failed_and_other_results_survive() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.csv"), "a,b,target\n1,2,0\n1,oops,1\n").unwrap();
    let mut config = smoke_config(&dir.path().join("out"));
    config.models.truncate(1);
    config.datasets.push(DatasetEntry {
        files: vec![dir.path().join("bad.csv")],
        ..DatasetEntry::new(DatasetKind::BreastCancer)
    });
    let outcome = run_benchmark(&config).unwrap();
    assert_eq!(outcome.failed_jobs(), 1);
    let bad = outcome.record("breast_cancer", "classical").unwrap();
    assert_eq!(bad.status, RunStatus::Failed);
    assert!(bad.failures[0].error.contains(":3:"), "{}", bad.failures[0].error);
    assert_eq!(outcome.record("wine", "classical").unwrap().status, RunStatus::Ok);

    let reloaded = load_records(&dir.path().join("out")).unwrap();
    assert_eq!(reloaded.len(), 2);
    let csv = fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("breast_cancer,classical,,failed")));
    let summary = emit_summary(&dir.path().join("out")).unwrap();
    assert!(summary.markdown.contains("failed"));
}

fn record(dataset: &str, model: ModelKind, accs: &[f64], f1: f64) -> ResultRecord {
    let folds: Vec<FoldMetrics> = accs
        .iter()
        .enumerate()
        .map(|(i, &a)| FoldMetrics {
            fold: i,
            accuracy: a,
            precision: f1,
            recall: f1,
            f1,
            roc_auc: None,
            epochs_ran: 3,
        })
        .collect();
    let mean = |v: f64| Some(v);
    let n = accs.len() as f64;
    let acc_mean = accs.iter().sum::<f64>() / n;
    let acc_std = if accs.len() > 1 {
        (accs.iter().map(|a| (a - acc_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut means = BTreeMap::new();
    let mut stds = BTreeMap::new();
    let mut defined = BTreeMap::new();
    for (name, m, s) in [
        ("accuracy", mean(acc_mean), Some(acc_std)),
        ("precision", mean(f1), Some(0.0)),
        ("recall", mean(f1), Some(0.0)),
        ("f1", mean(f1), Some(0.0)),
        ("roc_auc", None, None),
    ] {
        means.insert(name.to_string(), m);
        stds.insert(name.to_string(), s);
        defined.insert(name.to_string(), if m.is_some() { accs.len() } else { 0 });
    }
    ResultRecord {
        dataset: dataset.into(),
        model: model.name().into(),
        status: RunStatus::Ok,
        seed: 0,
        config_hash: "0".repeat(16),
        folds,
        failures: Vec::new(),
        mean: means,
        std: stds,
        defined_folds: defined,
        spec: ModelSpec::new(model),
        provenance: Vec::new(),
    }
}

#[test]
fn table_bolds_the_best_f1_row() {
    let records = vec![
        record("wine", ModelKind::QuantumOnly, &[0.3, 0.31], 0.29),
        record("wine", ModelKind::MidfusionAttn, &[0.97, 0.96], 0.965),
        record("wine", ModelKind::BestClassical, &[0.95, 0.93], 0.94),
    ];
    let table = summary_table(&records);
    let lines: Vec<&str> = table.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Model")).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("| best_classical | 0.940 ± 0.014 |"), "{}", lines[0]);
    assert!(lines[1].starts_with("| quantum_only |"));
    assert!(lines[2].starts_with("| **midfusion_attn** | **0.965 ± 0.007** |"), "{}", lines[2]);
    assert!(lines[2].ends_with("| **n/a** |"));
}

#[test]
fn plot_uses_fixed_axis_and_omits_quantum_only() {
    let records = vec![
        record("wine", ModelKind::QuantumOnly, &[0.3, 0.31], 0.29),
        record("wine", ModelKind::BestClassical, &[0.95, 0.93], 0.94),
        record("wine", ModelKind::EarlyFusion, &[0.9, 0.92], 0.90),
        record("wine", ModelKind::MidfusionAttn, &[0.97, 0.96], 0.965),
    ];
    let (svg, best) = accuracy_plot(&records);
    assert_eq!(PLOT_Y_RANGE, (70.0, 100.0));
    assert!(svg.contains(r#"data-min="70" data-max="100""#));
    assert!(svg.contains(">70</text>") && svg.contains(">100</text>"));
    assert!(!svg.contains(">65</text>") && !svg.contains(">105</text>"));
    assert_eq!(svg.matches(r#"class="bar""#).count(), 2);
    assert_eq!(svg.matches("error-bar").count(), 2);
    assert!(!svg.contains("quantum_only"));
    assert_eq!(best.get("wine").map(String::as_str), Some("midfusion_attn"));
    assert!(svg.contains(">midfusion_attn</text>"));
}

#[test]
fn single_record_single_fold_gives_one_bar_without_error_bar() {
    let dir = tempfile::tempdir().unwrap();
    let r = record("wine", ModelKind::Classical, &[0.9], 0.9);
    fs::write(dir.path().join(r.file_name()), serde_json::to_string(&r).unwrap()).unwrap();
    let out = emit_summary(dir.path()).unwrap();
    assert_eq!(out.svg.matches(r#"class="bar""#).count(), 1);
    assert_eq!(out.svg.matches("error-bar").count(), 0);
    assert!(dir.path().join("summary.md").is_file());
    assert!(dir.path().join("accuracy.svg").is_file());
}

#[test]
fn empty_results_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_summary(dir.path()).is_err());
}
