use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn hqfusion(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hqfusion"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("HQFUSION_OUT");
    if let Some(dir) = env_out {
        cmd.env("HQFUSION_OUT", dir);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "folds = 2\ndata_dir = {:?}\nout_dir = {:?}\n{extra}\n[train]\nepochs = 1\n\n[[datasets]]\nname = \"wine\"\n\n[[models]]\nkind = \"classical\"\n",
        data_dir().display().to_string(),
        dir.join("from-config").display().to_string(),
    );
    fs::write(&path, text).unwrap();
    path
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn validate_config_accepts_a_good_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = hqfusion(&["validate-config", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("ok"));
}

#[test]
fn configuration_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "folds = 1");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&hqfusion(&["validate-config", "--config", cfg], None)), 2);
    assert_eq!(code(&hqfusion(&["run", "--config", cfg], None)), 2);

    let good = write_config(tempfile::tempdir().unwrap().path(), "");
    let o = hqfusion(
        &["validate-config", "--config", good.to_str().unwrap(), "--models", "not_a_model"],
        None,
    );
    assert_eq!(code(&o), 2);
    assert_eq!(code(&hqfusion(&["run"], None)), 2);
    assert_eq!(code(&hqfusion(&["validate-config", "--config", "/no/such/file.toml"], None)), 2);
}

#[test]
fn missing_dataset_files_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = hqfusion(
        &["validate-config", "--config", cfg.to_str().unwrap(), "--datasets", "steel"],
        None,
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Faults.NNA"));
}

#[test]
fn run_honours_flag_then_env_then_config_for_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let env_dir = dir.path().join("from-env");
    let flag_dir = dir.path().join("from-flag");

    let o = hqfusion(&["run", "--config", cfg, "--seed", "4"], Some(&env_dir));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(env_dir.join("wine__classical.json").is_file());
    assert!(env_dir.join("summary.md").is_file());
    assert!(env_dir.join("accuracy.svg").is_file());
    assert!(String::from_utf8_lossy(&o.stdout).contains("| **classical** |"));
    let json = fs::read_to_string(env_dir.join("wine__classical.json")).unwrap();
    assert!(json.contains("\"seed\": 4"));

    let o = hqfusion(
        &["run", "--config", cfg, "--out", flag_dir.to_str().unwrap(), "--models", "classical,quantum_only"],
        Some(&env_dir),
    );
    assert_eq!(code(&o), 0);
    assert!(flag_dir.join("wine__quantum_only.json").is_file());
    assert!(!env_dir.join("wine__quantum_only.json").exists());

    let o = hqfusion(&["run", "--config", cfg], None);
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("from-config/wine__classical.json").is_file());

    let o = hqfusion(&["summarize", "--out", flag_dir.to_str().unwrap()], None);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("quantum_only"));
}

#[test]
fn failing_jobs_exit_with_one_and_keep_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("broken.csv"), "a,target\n1,0\nx,1\n").unwrap();
    let extra = format!(
        "[[datasets]]\nname = \"breast_cancer\"\nfiles = [{:?}]\n",
        dir.path().join("broken.csv").display().to_string()
    );
    let path = write_config(dir.path(), "");
    let text = fs::read_to_string(&path).unwrap() + "\n" + &extra;
    fs::write(&path, text).unwrap();
    let out = dir.path().join("out");
    let o = hqfusion(&["run", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("wine__classical.json").is_file());
    let failed = fs::read_to_string(out.join("breast_cancer__classical.json")).unwrap();
    assert!(failed.contains("\"status\": \"failed\""));
}

#[test]
fn summarize_without_results_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&hqfusion(&["summarize"], Some(dir.path()))), 1);
}
