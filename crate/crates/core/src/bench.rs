//! Cross-validation driver: run configuration, seed derivation, the
//! dataset x model x fold job runner, result files and the summary table/plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{DatasetKind, RawDataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{FoldMetrics, RunReport, METRIC_NAMES};
use crate::models::{Model, ModelKind, ModelSpec};
use crate::preprocessing::{plan_folds, FoldPlan, PcaFit, PcaMode, StandardizerFit};
use crate::quantum::CircuitConfig;
use crate::training::{train_fold, History, Split, TrainConfig};

/// Environment variable that replaces the configured output directory.
pub const OUT_DIR_ENV: &str = "HQFUSION_OUT";

/// Accuracy range (in percent) shown on the summary plot.
pub const PLOT_Y_RANGE: (f64, f64) = (70.0, 100.0);

const EVAL_CHUNK: usize = 256;

/// One dataset of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: DatasetKind,
    /// Input files; relative paths are resolved against the data directory.
    /// Empty means the dataset's default file names.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<PathBuf>,
    /// Stratified subsample size, replacing the dataset default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<usize>,
    /// Epoch budget for this dataset only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
}

impl DatasetEntry {
    pub fn new(name: DatasetKind) -> Self {
        Self {
            name,
            files: Vec::new(),
            cap: None,
            epochs: None,
        }
    }
}

/// A complete benchmark run, usually read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub folds: usize,
    pub monitor_fraction: f64,
    /// Cumulative variance kept by the classical PCA of models that use it.
    pub classical_variance: f64,
    /// Parallel jobs; `None` uses every core.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// `qubits` is an upper bound: each fold uses `min(qubits, d, n_train)`.
    pub circuit: CircuitConfig,
    pub train: TrainConfig,
    pub datasets: Vec<DatasetEntry>,
    pub models: Vec<ModelSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            folds: 5,
            monitor_fraction: 0.10,
            classical_variance: 0.95,
            workers: None,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("results"),
            circuit: CircuitConfig::default(),
            train: TrainConfig::default(),
            datasets: Vec::new(),
            models: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Checks everything that can be checked without touching the file system.
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if !(self.monitor_fraction > 0.0 && self.monitor_fraction < 1.0) {
            return Err(Error::Config(format!(
                "monitor fraction {} outside (0, 1)",
                self.monitor_fraction
            )));
        }
        if !(self.classical_variance > 0.0 && self.classical_variance <= 1.0) {
            return Err(Error::Config(format!(
                "classical variance {} outside (0, 1]",
                self.classical_variance
            )));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        self.circuit.validate()?;
        self.train.validate()?;
        if self.datasets.is_empty() || self.models.is_empty() {
            return Err(Error::Config("a run needs at least one dataset and one model".into()));
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if self.datasets[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::Config(format!("dataset {} listed twice", d.name)));
            }
            if !d.files.is_empty() && d.files.len() != d.name.default_files().len() {
                return Err(Error::Config(format!(
                    "{} needs {} file(s), got {}",
                    d.name,
                    d.name.default_files().len(),
                    d.files.len()
                )));
            }
            if d.epochs == Some(0) || d.cap == Some(0) {
                return Err(Error::Config(format!("{}: cap and epochs must be positive", d.name)));
            }
        }
        for (i, m) in self.models.iter().enumerate() {
            m.validate()?;
            if self.models[..i].iter().any(|o| o.kind == m.kind) {
                return Err(Error::Config(format!("model {} listed twice", m.kind)));
            }
        }
        Ok(())
    }

    pub fn dataset_files(&self, entry: &DatasetEntry) -> Vec<PathBuf> {
        let names: Vec<PathBuf> = if entry.files.is_empty() {
            entry.name.default_files().iter().map(PathBuf::from).collect()
        } else {
            entry.files.clone()
        };
        names
            .into_iter()
            .map(|p| if p.is_absolute() { p } else { self.data_dir.join(p) })
            .collect()
    }

    /// Every input file that does not exist.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        self.datasets
            .iter()
            .flat_map(|d| self.dataset_files(d))
            .filter(|p| !p.is_file())
            .collect()
    }

    /// Training settings for `entry`, with its epoch override applied.
    pub fn train_config(&self, entry: &DatasetEntry) -> TrainConfig {
        let mut train = self.train.clone();
        if let Some(epochs) = entry.epochs {
            train.epochs = epochs;
        }
        train
    }

    /// Short digest of every setting that influences the results of one
    /// (dataset, model) pair. Paths and worker counts do not count.
    pub fn config_hash(&self, entry: &DatasetEntry, spec: &ModelSpec) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            folds: usize,
            monitor_fraction: f64,
            classical_variance: f64,
            circuit: &'a CircuitConfig,
            train: TrainConfig,
            dataset: DatasetKind,
            cap: Option<usize>,
            spec: &'a ModelSpec,
        }
        let key = Key {
            seed: self.seed,
            folds: self.folds,
            monitor_fraction: self.monitor_fraction,
            classical_variance: self.classical_variance,
            circuit: &self.circuit,
            train: self.train_config(entry),
            dataset: entry.name,
            cap: entry.cap,
            spec,
        };
        let json = serde_json::to_vec(&key).expect("plain data always serializes");
        Sha256::digest(json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// The splitmix64 output function applied to `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What a derived seed is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    Subsample = 1,
    Folds = 2,
    Init = 3,
    Shuffle = 4,
}

/// Hierarchical seeds: `root -> dataset -> model -> fold -> purpose`.
///
/// Each level is `child(parent, key) = splitmix64(parent ^ splitmix64(key))`,
/// which is a bijection in `key` for a fixed parent, so siblings never share
/// a seed. Names enter as their 64-bit FNV-1a hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

fn name_key(name: &str) -> u64 {
    name.bytes()
        .fold(0xCBF2_9CE4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3))
}

fn child(parent: u64, key: u64) -> u64 {
    splitmix64(parent ^ splitmix64(key))
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    /// Seeds shared by every model of a dataset (subsampling and folds).
    pub fn dataset(&self, dataset: &str, purpose: Purpose) -> u64 {
        child(child(self.root, name_key(dataset)), purpose as u64)
    }

    pub fn job(&self, dataset: &str, model: &str, fold: usize, purpose: Purpose) -> u64 {
        let d = child(self.root, name_key(dataset));
        let m = child(d, name_key(model) ^ 0x8000_0000_0000_0000);
        child(child(m, fold as u64), purpose as u64)
    }
}

/// Features of one fold after fold-local preprocessing.
#[derive(Clone, Debug)]
pub struct PreparedFold {
    pub classical: [Matrix; 3],
    pub quantum: [Matrix; 3],
    pub labels: [Vec<usize>; 3],
}

impl PreparedFold {
    pub fn split(&self, part: usize) -> Split<'_> {
        Split {
            classical: &self.classical[part],
            quantum: &self.quantum[part],
            labels: &self.labels[part],
        }
    }

    pub fn qubits(&self) -> usize {
        self.quantum[0].cols()
    }

    pub fn classical_dim(&self) -> usize {
        self.classical[0].cols()
    }
}

/// Standardizes with statistics of the fold's training rows, then builds
/// the circuit input (`min(max_qubits, d, n_train)` principal components)
/// and the classical input (PCA to `classical_variance` when requested,
/// standardized features otherwise). Nothing is fitted on monitor or test rows.
pub fn prepare_fold(
    ds: &RawDataset,
    plan: &FoldPlan,
    classical_variance: Option<f64>,
    max_qubits: usize,
) -> Result<PreparedFold> {
    let parts = [&plan.train_idx, &plan.monitor_idx, &plan.test_idx];
    let raw = parts.map(|idx| ds.x.select_rows(idx));
    let standardizer = StandardizerFit::fit(&raw[0])?;
    let std = [
        standardizer.transform(&raw[0])?,
        standardizer.transform(&raw[1])?,
        standardizer.transform(&raw[2])?,
    ];

    let r = max_qubits.min(ds.num_features()).min(plan.train_idx.len());
    let quantum_pca = PcaFit::fit(&std[0], PcaMode::Components(r))?;
    let quantum = [
        quantum_pca.project(&std[0])?,
        quantum_pca.project(&std[1])?,
        quantum_pca.project(&std[2])?,
    ];
    let classical = match classical_variance {
        Some(v) => {
            let pca = PcaFit::fit(&std[0], PcaMode::Variance(v))?;
            [pca.project(&std[0])?, pca.project(&std[1])?, pca.project(&std[2])?]
        }
        None => std,
    };
    let labels = parts.map(|idx| idx.iter().map(|&i| ds.y[i]).collect());
    Ok(PreparedFold {
        classical,
        quantum,
        labels,
    })
}

/// Test metrics and training history of one fold.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub metrics: FoldMetrics,
    pub history: History,
    pub qubits: usize,
    pub classical_dim: usize,
}

/// Preprocesses, trains and evaluates one (dataset, model, fold) job.
pub fn run_fold(
    ds: &RawDataset,
    plan: &FoldPlan,
    spec: &ModelSpec,
    config: &RunConfig,
    train: &TrainConfig,
    seeds: &SeedTree,
) -> Result<FoldOutcome> {
    let variance = spec.classical_pca().then_some(config.classical_variance);
    let data = prepare_fold(ds, plan, variance, config.circuit.qubits)?;
    let circuit = CircuitConfig::new(data.qubits(), config.circuit.layers)?;
    let model_name = spec.kind.name();
    let seed = |p| seeds.job(&ds.name, model_name, plan.fold_index, p);

    let mut rng = ChaCha8Rng::seed_from_u64(seed(Purpose::Init));
    let mut model: Model<f32> = Model::new(spec, circuit, ds.num_classes(), data.classical_dim(), &mut rng)?;
    let monitor = data.split(1);
    let history = train_fold(
        &mut model,
        &data.split(0),
        Some(&monitor),
        train,
        seed(Purpose::Shuffle),
    )?;

    let test = data.split(2);
    let mut probs = Vec::new();
    let rows: Vec<usize> = (0..test.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let xc = test.classical.select_rows(chunk);
        let xq = test.quantum.select_rows(chunk);
        probs.extend(model.predict_proba(xc.as_slice(), xq.as_slice(), chunk.len())?);
    }
    let metrics = FoldMetrics::evaluate(
        plan.fold_index,
        &probs,
        ds.num_classes(),
        test.labels,
        history.epochs_ran(),
    )?;
    Ok(FoldOutcome {
        metrics,
        history,
        qubits: data.qubits(),
        classical_dim: data.classical_dim(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldFailure {
    /// `None` when the dataset itself could not be prepared.
    pub fold: Option<usize>,
    pub error: String,
}

/// Result file of one (dataset, model) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub dataset: String,
    pub model: String,
    pub status: RunStatus,
    pub seed: u64,
    pub config_hash: String,
    pub folds: Vec<FoldMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<FoldFailure>,
    /// `None` where no fold defines the metric.
    pub mean: BTreeMap<String, Option<f64>>,
    pub std: BTreeMap<String, Option<f64>>,
    pub defined_folds: BTreeMap<String, usize>,
    pub spec: ModelSpec,
    #[serde(default)]
    pub provenance: Vec<String>,
}

impl ResultRecord {
    fn new(
        dataset: &str,
        spec: &ModelSpec,
        config_hash: String,
        seed: u64,
        folds: Vec<FoldMetrics>,
        failures: Vec<FoldFailure>,
        provenance: Vec<String>,
    ) -> Self {
        let (mut mean, mut std, mut defined) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        if let Ok(report) = RunReport::aggregate(dataset, spec.kind.name(), seed, folds.clone()) {
            for name in METRIC_NAMES {
                let s = report.metric(name);
                mean.insert(name.to_string(), (!s.mean.is_nan()).then_some(s.mean));
                std.insert(name.to_string(), (!s.std.is_nan()).then_some(s.std));
                defined.insert(name.to_string(), s.folds);
            }
        }
        Self {
            dataset: dataset.to_string(),
            model: spec.kind.name().to_string(),
            status: if failures.is_empty() { RunStatus::Ok } else { RunStatus::Failed },
            seed,
            config_hash,
            folds,
            failures,
            mean,
            std,
            defined_folds: defined,
            spec: spec.clone(),
            provenance,
        }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.mean.get(metric).copied().flatten()
    }

    pub fn std(&self, metric: &str) -> Option<f64> {
        self.std.get(metric).copied().flatten()
    }

    pub fn kind(&self) -> Option<ModelKind> {
        self.model.parse().ok()
    }

    pub fn file_name(&self) -> String {
        format!("{}__{}.json", self.dataset, self.model)
    }
}

/// Everything a run produced.
#[derive(Clone, Debug)]
pub struct BenchOutcome {
    pub records: Vec<ResultRecord>,
    pub histories: Vec<(String, String, usize, History)>,
    pub out_dir: PathBuf,
}

impl BenchOutcome {
    pub fn failed_jobs(&self) -> usize {
        self.records.iter().map(|r| r.failures.len()).sum()
    }

    pub fn record(&self, dataset: &str, model: &str) -> Option<&ResultRecord> {
        self.records.iter().find(|r| r.dataset == dataset && r.model == model)
    }
}

struct Job<'a> {
    entry: usize,
    spec: &'a ModelSpec,
    plan: &'a FoldPlan,
}

/// Runs every (dataset, model, fold) job of `config` and writes the result
/// files into `config.out_dir`. Job failures are recorded in the results and
/// counted by [`BenchOutcome::failed_jobs`]; only configuration and I/O
/// problems are returned as errors.
pub fn run_benchmark(config: &RunConfig) -> Result<BenchOutcome> {
    config.validate()?;
    let missing = config.missing_files();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Config(format!("missing input files: {}", list.join(", "))));
    }
    let seeds = SeedTree::new(config.seed);

    let mut prepared: Vec<Result<(RawDataset, Vec<FoldPlan>)>> = Vec::new();
    for entry in &config.datasets {
        let name = entry.name.name();
        let result = entry
            .name
            .prepare(
                &config.dataset_files(entry),
                entry.cap,
                seeds.dataset(name, Purpose::Subsample),
            )
            .and_then(|ds| {
                let plans = plan_folds(
                    &ds.y,
                    config.folds,
                    config.monitor_fraction,
                    seeds.dataset(name, Purpose::Folds),
                )?;
                log::info!(
                    "{name}: {} rows, {} features, {} classes, {} folds",
                    ds.len(),
                    ds.num_features(),
                    ds.num_classes(),
                    plans.len()
                );
                Ok((ds, plans))
            });
        if let Err(e) = &result {
            log::error!("{name}: {e}");
        }
        prepared.push(result);
    }

    let mut jobs = Vec::new();
    for (entry, data) in prepared.iter().enumerate() {
        if let Ok((_, plans)) = data {
            for spec in &config.models {
                for plan in plans {
                    jobs.push(Job { entry, spec, plan });
                }
            }
        }
    }
    let execute = |job: &Job<'_>| {
        let entry = &config.datasets[job.entry];
        let (ds, _) = prepared[job.entry].as_ref().expect("jobs exist only for prepared datasets");
        let started = std::time::Instant::now();
        let result = run_fold(ds, job.plan, job.spec, config, &config.train_config(entry), &seeds);
        match &result {
            Ok(o) => log::info!(
                "{} / {} / fold {}: accuracy {:.3}, f1 {:.3}, {} epochs, {:.1}s",
                ds.name,
                job.spec.kind,
                job.plan.fold_index,
                o.metrics.accuracy,
                o.metrics.f1,
                o.metrics.epochs_ran,
                started.elapsed().as_secs_f64()
            ),
            Err(e) => log::error!("{} / {} / fold {}: {e}", ds.name, job.spec.kind, job.plan.fold_index),
        }
        result
    };
    let outcomes: Vec<Result<FoldOutcome>> = match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| jobs.par_iter().map(execute).collect()),
        None => jobs.par_iter().map(execute).collect(),
    };

    let mut records = Vec::new();
    let mut histories = Vec::new();
    let mut outcomes = jobs.iter().zip(outcomes);
    for (e, entry) in config.datasets.iter().enumerate() {
        for spec in &config.models {
            let hash = config.config_hash(entry, spec);
            let (folds, failures, provenance) = match &prepared[e] {
                Err(err) => (
                    Vec::new(),
                    vec![FoldFailure {
                        fold: None,
                        error: err.to_string(),
                    }],
                    Vec::new(),
                ),
                Ok((ds, plans)) => {
                    let mut folds = Vec::new();
                    let mut failures = Vec::new();
                    for (job, outcome) in outcomes.by_ref().take(plans.len()) {
                        match outcome {
                            Ok(o) => {
                                histories.push((ds.name.clone(), spec.kind.name().to_string(), job.plan.fold_index, o.history));
                                folds.push(o.metrics);
                            }
                            Err(err) => failures.push(FoldFailure {
                                fold: Some(job.plan.fold_index),
                                error: err.to_string(),
                            }),
                        }
                    }
                    (folds, failures, ds.provenance.clone())
                }
            };
            records.push(ResultRecord::new(
                entry.name.name(),
                spec,
                hash,
                config.seed,
                folds,
                failures,
                provenance,
            ));
        }
    }

    let outcome = BenchOutcome {
        records,
        histories,
        out_dir: config.out_dir.clone(),
    };
    write_results(&outcome, config)?;
    Ok(outcome)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn write_results(outcome: &BenchOutcome, config: &RunConfig) -> Result<()> {
    let dir = &outcome.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for record in &outcome.records {
        let json = serde_json::to_string_pretty(record).map_err(|e| Error::Serde(e.to_string()))?;
        write_file(&dir.join(record.file_name()), json + "\n")?;
    }
    write_file(&dir.join("run_config.toml"), config.to_toml()?)?;

    let mut folds = csv::Writer::from_writer(Vec::new());
    folds
        .write_record([
            "dataset", "model", "fold", "status", "accuracy", "precision", "recall", "f1", "roc_auc", "epochs_ran",
            "error",
        ])
        .map_err(csv_error)?;
    for r in &outcome.records {
        for f in &r.folds {
            folds
                .write_record([
                    r.dataset.clone(),
                    r.model.clone(),
                    f.fold.to_string(),
                    "ok".into(),
                    f.accuracy.to_string(),
                    f.precision.to_string(),
                    f.recall.to_string(),
                    f.f1.to_string(),
                    opt(f.roc_auc),
                    f.epochs_ran.to_string(),
                    String::new(),
                ])
                .map_err(csv_error)?;
        }
        for f in &r.failures {
            let fold = f.fold.map(|v| v.to_string()).unwrap_or_default();
            let mut row = vec![r.dataset.clone(), r.model.clone(), fold, "failed".into()];
            row.extend(std::iter::repeat_n(String::new(), 6));
            row.push(f.error.clone());
            folds.write_record(row).map_err(csv_error)?;
        }
    }
    write_file(&dir.join("results.csv"), folds.into_inner().map_err(|e| Error::Serde(e.to_string()))?)?;

    let mut hist = csv::Writer::from_writer(Vec::new());
    hist.write_record(["dataset", "model", "fold", "epoch", "train_loss", "monitor_metric", "lr"])
        .map_err(csv_error)?;
    for (dataset, model, fold, h) in &outcome.histories {
        for e in &h.epochs {
            hist.write_record([
                dataset.clone(),
                model.clone(),
                fold.to_string(),
                e.epoch.to_string(),
                e.train_loss.to_string(),
                opt(e.monitor_metric),
                e.lr.to_string(),
            ])
            .map_err(csv_error)?;
        }
    }
    write_file(&dir.join("history.csv"), hist.into_inner().map_err(|e| Error::Serde(e.to_string()))?)
}

/// Reads every result record (`*.json`) in `dir`, sorted by file name.
pub fn load_records(dir: &Path) -> Result<Vec<ResultRecord>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Rendered summary of a results directory.
#[derive(Clone, Debug)]
pub struct SummaryOutput {
    pub markdown: String,
    pub svg: String,
    /// Best fusion variant (by mean F1) of each dataset that has one.
    pub best_fusion: BTreeMap<String, String>,
}

fn model_rank(model: &str) -> usize {
    model
        .parse::<ModelKind>()
        .ok()
        .and_then(|k| ModelKind::ALL.iter().position(|&m| m == k))
        .unwrap_or(usize::MAX)
}

fn grouped(records: &[ResultRecord]) -> BTreeMap<&str, Vec<&ResultRecord>> {
    let mut groups: BTreeMap<&str, Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.dataset.as_str()).or_default().push(r);
    }
    for rows in groups.values_mut() {
        rows.sort_by(|a, b| model_rank(&a.model).cmp(&model_rank(&b.model)).then(a.model.cmp(&b.model)));
    }
    groups
}

fn best_by_f1<'a>(rows: impl IntoIterator<Item = &'a ResultRecord>) -> Option<&'a ResultRecord> {
    let mut best: Option<&ResultRecord> = None;
    for r in rows {
        if let Some(f1) = r.mean("f1") {
            if best.and_then(|b| b.mean("f1")).is_none_or(|b| f1 > b) {
                best = Some(r);
            }
        }
    }
    best
}

/// Markdown tables (one per dataset, best mean F1 in bold).
pub fn summary_table(records: &[ResultRecord]) -> String {
    let mut out = String::new();
    for (dataset, rows) in grouped(records) {
        let best = best_by_f1(rows.iter().copied()).map(|r| r.model.as_str());
        let _ = writeln!(out, "## {dataset}\n");
        out.push_str("| Model | Accuracy | Precision | Recall | F1 | ROC-AUC |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for r in &rows {
            let bold = best == Some(r.model.as_str());
            let cell = |text: String| if bold { format!("**{text}**") } else { text };
            let mut line = format!("| {} |", cell(r.model.clone()));
            for metric in METRIC_NAMES {
                let text = match (r.mean(metric), r.std(metric)) {
                    (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
                    _ if r.status == RunStatus::Failed && r.folds.is_empty() => "failed".to_string(),
                    _ => "n/a".to_string(),
                };
                let _ = write!(line, " {} |", cell(text));
            }
            if r.status == RunStatus::Failed && !r.folds.is_empty() {
                let _ = write!(line, " {} of {} folds failed", r.failures.len(), r.failures.len() + r.folds.len());
            }
            out.push_str(&line);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

struct Bar {
    label: String,
    mean: f64,
    std: Option<f64>,
    note: Option<String>,
}

const PALETTE: [&str; 6] = ["#4c72b0", "#55a868", "#c44e52", "#8172b2", "#ccb974", "#64b5cd"];

fn y_of(percent: f64, top: f64, height: f64) -> f64 {
    let (lo, hi) = PLOT_Y_RANGE;
    top + height * (hi - percent.clamp(lo, hi)) / (hi - lo)
}

/// Grouped bar chart of mean test accuracy per dataset with standard
/// deviation error bars. Classical models get one bar each and the fusion
/// models are represented by their best variant (by mean F1), which is named
/// above its bar. Quantum-only models are left out.
pub fn accuracy_plot(records: &[ResultRecord]) -> (String, BTreeMap<String, String>) {
    let groups = grouped(records);
    let mut best_fusion = BTreeMap::new();
    let mut series: Vec<String> = Vec::new();
    let mut bars: Vec<(&str, Vec<Bar>)> = Vec::new();
    for (dataset, rows) in &groups {
        let mut group = Vec::new();
        let usable = |r: &&ResultRecord| r.mean("accuracy").is_some();
        for r in rows.iter().copied().filter(usable) {
            if r.kind().is_some_and(|k| k.uses_classical() && !k.uses_quantum()) {
                group.push(bar(r, r.model.clone(), None));
            }
        }
        let fusion = rows.iter().copied().filter(usable).filter(|r| r.kind().is_some_and(|k| k.is_fusion()));
        if let Some(best) = best_by_f1(fusion) {
            best_fusion.insert(dataset.to_string(), best.model.clone());
            group.push(bar(best, "best fusion".into(), Some(best.model.clone())));
        }
        for b in &group {
            if !series.contains(&b.label) {
                series.push(b.label.clone());
            }
        }
        bars.push((dataset, group));
    }

    let (left, top, height, bar_w, gap) = (60.0, 40.0, 300.0, 28.0, 36.0);
    let group_w = |n: usize| n.max(1) as f64 * bar_w + gap;
    let plot_w: f64 = bars.iter().map(|(_, g)| group_w(g.len())).sum::<f64>().max(120.0);
    let width = left + plot_w + 160.0;
    let total_h = top + height + 60.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total_h}" viewBox="0 0 {width} {total_h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{total_h}" fill="white"/>"#);
    let (lo, hi) = PLOT_Y_RANGE;
    let _ = writeln!(
        svg,
        r#"<g id="y-axis" data-min="{lo}" data-max="{hi}">"#
    );
    let mut tick = lo;
    while tick <= hi {
        let y = y_of(tick, top, height);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#dddddd"/><text x="{}" y="{}" text-anchor="end">{tick}</text>"##,
            left + plot_w,
            left - 6.0,
            y + 4.0
        );
        tick += 5.0;
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/></g>"#,
        top + height
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">Test accuracy (%)</text>"#,
        top + height / 2.0
    );

    let mut x = left + gap / 2.0;
    for (dataset, group) in &bars {
        for b in group {
            let color = PALETTE[series.iter().position(|s| *s == b.label).unwrap_or(0) % PALETTE.len()];
            let y = y_of(b.mean * 100.0, top, height);
            let _ = writeln!(
                svg,
                r#"<rect class="bar" x="{x}" y="{y}" width="{}" height="{}" fill="{color}"><title>{dataset} {}: {:.1}</title></rect>"#,
                bar_w - 2.0,
                top + height - y,
                b.note.as_deref().unwrap_or(&b.label),
                b.mean * 100.0
            );
            if let Some(s) = b.std {
                let (y1, y2) = (y_of((b.mean + s) * 100.0, top, height), y_of((b.mean - s) * 100.0, top, height));
                let cx = x + (bar_w - 2.0) / 2.0;
                let _ = writeln!(
                    svg,
                    r#"<path class="error-bar" d="M{cx} {y1}V{y2}M{} {y1}H{}M{} {y2}H{}" stroke="black"/>"#,
                    cx - 4.0,
                    cx + 4.0,
                    cx - 4.0,
                    cx + 4.0
                );
            }
            if let Some(note) = &b.note {
                let ty = y_of((b.mean + b.std.unwrap_or(0.0)) * 100.0, top, height) - 4.0;
                let _ = writeln!(
                    svg,
                    r#"<text x="{}" y="{ty}" font-size="9" text-anchor="middle">{note}</text>"#,
                    x + bar_w / 2.0
                );
            }
            x += bar_w;
        }
        let start = x - group.len() as f64 * bar_w;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{dataset}</text>"#,
            (start + x) / 2.0,
            top + height + 18.0
        );
        x += gap;
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + height,
        left + plot_w,
        top + height
    );
    for (i, s) in series.iter().enumerate() {
        let y = top + 14.0 * i as f64;
        let lx = left + plot_w + 16.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{s}</text>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            lx + 14.0,
            y
        );
    }
    svg.push_str("</svg>\n");
    (svg, best_fusion)
}

fn bar(r: &ResultRecord, label: String, note: Option<String>) -> Bar {
    let folds = r.defined_folds.get("accuracy").copied().unwrap_or(0);
    Bar {
        label,
        mean: r.mean("accuracy").unwrap_or(f64::NAN),
        std: r.std("accuracy").filter(|&s| folds > 1 && s > 0.0),
        note,
    }
}

/// Writes `summary.md` and `accuracy.svg` for the records in `dir`.
pub fn emit_summary(dir: &Path) -> Result<SummaryOutput> {
    let records = load_records(dir)?;
    if records.is_empty() {
        return Err(Error::Data(format!("no result records in {}", dir.display())));
    }
    let markdown = summary_table(&records);
    let (svg, best_fusion) = accuracy_plot(&records);
    write_file(&dir.join("summary.md"), &markdown)?;
    write_file(&dir.join("accuracy.svg"), &svg)?;
    Ok(SummaryOutput {
        markdown,
        svg,
        best_fusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference generator seeded with 0.
        let mut state = 0u64;
        let mut next = || {
            let out = splitmix64(state);
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            out
        };
        assert_eq!(next(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(next(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(next(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn seed_tree_is_stable_and_distinguishes_jobs() {
        let a = SeedTree::new(7);
        assert_eq!(a.job("wine", "classical", 0, Purpose::Init), SeedTree::new(7).job("wine", "classical", 0, Purpose::Init));
        assert_ne!(a.job("wine", "classical", 0, Purpose::Init), a.job("wine", "classical", 1, Purpose::Init));
        assert_ne!(a.job("wine", "classical", 0, Purpose::Init), a.job("wine", "classical", 0, Purpose::Shuffle));
        assert_ne!(a.job("wine", "classical", 0, Purpose::Init), SeedTree::new(8).job("wine", "classical", 0, Purpose::Init));
        assert_ne!(a.dataset("wine", Purpose::Folds), a.dataset("breast_cancer", Purpose::Folds));
    }

    #[test]
    fn seed_tree_has_no_collisions_over_a_million_jobs() {
        let tree = SeedTree::new(0);
        let models: Vec<String> = (0..1000).map(|m| format!("model_{m}")).collect();
        let mut seen = HashSet::with_capacity(1_000_000);
        for m in &models {
            for fold in 0..1000 {
                assert!(seen.insert(tree.job("wine", m, fold, Purpose::Init)), "{m} fold {fold}");
            }
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut config = RunConfig::default();
        config.datasets = vec![DatasetEntry::new(DatasetKind::Wine), DatasetEntry {
            name: DatasetKind::Covertype,
            files: vec!["cov.csv.gz".into()],
            cap: Some(2000),
            epochs: Some(15),
        }];
        let mut attn = ModelSpec::new(ModelKind::MidfusionAttn);
        attn.trunk_depth = Some(3);
        config.models = vec![ModelSpec::new(ModelKind::BestClassical), attn];
        config.workers = Some(2);
        let text = config.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), config);
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let config = RunConfig::from_toml_str(
            r#"
            [[datasets]]
            name = "wine"
            [[models]]
            kind = "classical_deep"
            "#,
        )
        .unwrap();
        assert_eq!(config.folds, 5);
        assert_eq!(config.circuit, CircuitConfig::new(9, 3).unwrap());
        assert_eq!(config.train.epochs, 30);
        assert_eq!(config.models[0].kind, ModelKind::BestClassical);
        assert_eq!(config.dataset_files(&config.datasets[0]), vec![PathBuf::from("data/wine.csv")]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = "[[datasets]]\nname = \"wine\"\n[[models]]\nkind = \"classical\"\n";
        assert!(RunConfig::from_toml_str(base).is_ok());
        for bad in [
            format!("folds = 1\n{base}"),
            format!("monitor_fraction = 1.0\n{base}"),
            format!("bogus = 3\n{base}"),
            format!("{base}[[models]]\nkind = \"classical\"\n"),
            format!("{base}[[models]]\nkind = \"midfusion_attn\"\nheads = 5\n"),
            format!("[circuit]\nqubits = 13\nlayers = 3\n{base}"),
            "[[models]]\nkind = \"classical\"\n".to_string(),
        ] {
            assert!(matches!(RunConfig::from_toml_str(&bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn config_hash_tracks_result_relevant_settings() {
        let mut config = RunConfig::default();
        let entry = DatasetEntry::new(DatasetKind::Wine);
        let spec = ModelSpec::new(ModelKind::Classical);
        let h = config.config_hash(&entry, &spec);
        assert_eq!(h.len(), 16);
        config.out_dir = "elsewhere".into();
        config.workers = Some(3);
        assert_eq!(config.config_hash(&entry, &spec), h);
        config.train.epochs = 2;
        assert_ne!(config.config_hash(&entry, &spec), h);
    }
}
