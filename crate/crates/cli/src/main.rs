use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hqfusion::bench::{emit_summary, run_benchmark, DatasetEntry, RunConfig, OUT_DIR_ENV};
use hqfusion::datasets::DatasetKind;
use hqfusion::models::{ModelKind, ModelSpec};
use hqfusion::Error;

const EXIT_JOB_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

/// Cross-validated benchmark of classical, quantum and hybrid fusion classifiers.
#[derive(Debug, Parser)]
#[command(name = "hqfusion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate every dataset x model x fold job of a run config.
    Run {
        #[command(flatten)]
        select: Selection,
        /// Number of parallel jobs (defaults to the config, then all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Rebuild summary.md and accuracy.svg from the result files of a run.
    Summarize {
        /// Results directory (default: $HQFUSION_OUT, then `results`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse a run config and check that its input files exist.
    ValidateConfig {
        #[command(flatten)]
        select: Selection,
    },
}

#[derive(Debug, clap::Args)]
struct Selection {
    #[arg(long)]
    config: PathBuf,
    /// Replaces the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; takes precedence over $HQFUSION_OUT and the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated model names; models missing from the config use defaults.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Comma-separated dataset names; datasets missing from the config use defaults.
    #[arg(long, value_delimiter = ',')]
    datasets: Option<Vec<String>>,
}

fn env_out_dir() -> Option<PathBuf> {
    std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn build_config(select: &Selection) -> Result<RunConfig, Error> {
    let mut config = RunConfig::load(&select.config)?;
    if let Some(seed) = select.seed {
        config.seed = seed;
    }
    if let Some(out) = select.out.clone().or_else(env_out_dir) {
        config.out_dir = out;
    }
    if let Some(names) = &select.models {
        config.models = names
            .iter()
            .map(|n| {
                let kind: ModelKind = n.trim().parse()?;
                Ok(config
                    .models
                    .iter()
                    .find(|m| m.kind == kind)
                    .cloned()
                    .unwrap_or_else(|| ModelSpec::new(kind)))
            })
            .collect::<Result<_, Error>>()?;
    }
    if let Some(names) = &select.datasets {
        config.datasets = names
            .iter()
            .map(|n| {
                let kind: DatasetKind = n.trim().parse()?;
                Ok(config
                    .datasets
                    .iter()
                    .find(|d| d.name == kind)
                    .cloned()
                    .unwrap_or_else(|| DatasetEntry::new(kind)))
            })
            .collect::<Result<_, Error>>()?;
    }
    config.validate()?;
    let missing = config.missing_files();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Config(format!("missing input files: {}", list.join(", "))));
    }
    Ok(config)
}

fn config_failure(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn run(select: &Selection, workers: Option<usize>) -> ExitCode {
    let mut config = match build_config(select) {
        Ok(c) => c,
        Err(e) => return config_failure(&e),
    };
    if workers.is_some() {
        config.workers = workers;
    }
    let outcome = match run_benchmark(&config) {
        Ok(o) => o,
        Err(e @ Error::Config(_)) => return config_failure(&e),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_JOB_FAILURE);
        }
    };
    match emit_summary(&outcome.out_dir) {
        Ok(summary) => print!("{}", summary.markdown),
        Err(e) => eprintln!("warning: could not write summary: {e}"),
    }
    println!("results written to {}", outcome.out_dir.display());
    let failed = outcome.failed_jobs();
    if failed > 0 {
        eprintln!("{failed} job(s) failed; see the failures in the result files");
        return ExitCode::from(EXIT_JOB_FAILURE);
    }
    ExitCode::SUCCESS
}

fn summarize(out: Option<PathBuf>) -> ExitCode {
    let dir = out.or_else(env_out_dir).unwrap_or_else(|| PathBuf::from("results"));
    match emit_summary(&dir) {
        Ok(summary) => {
            print!("{}", summary.markdown);
            for (dataset, model) in &summary.best_fusion {
                println!("best fusion on {dataset}: {model}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_JOB_FAILURE)
        }
    }
}

fn validate(select: &Selection) -> ExitCode {
    match build_config(select) {
        Ok(config) => {
            let jobs = config.datasets.len() * config.models.len() * config.folds;
            println!(
                "{}: ok ({} dataset(s), {} model(s), up to {jobs} fold jobs, output to {})",
                select.config.display(),
                config.datasets.len(),
                config.models.len(),
                Path::new(&config.out_dir).display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => config_failure(&e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { select, workers } => run(&select, workers),
        Command::Summarize { out } => summarize(out),
        Command::ValidateConfig { select } => validate(&select),
    }
}
