use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "federation": {"synthesize": {"spec": {"user_count": 40, "size_mean": 15.0, "size_std": 6.0,
    "positive_rate": 0.2, "feature_dim": 4, "user_shift_scale": 0.5, "class_separation": 4.0}, "seed": 1}},
  "model": {"layer_dims": [4, 6, 2]},
  "local": {"epochs": 1, "batch_size": 8, "eta_local": 0.05},
  "strategy": {"kind": "adam", "eta_global": 0.01},
  "participation": 0.25,
  "max_rounds": 6,
  "targets": {"fah_budget": 50.0, "recall_target": 1.0},
  "master_seed": 2,
  "baseline": {"mode": "central_sgd", "learning_rate": 0.05, "max_steps": 10}
}"#;

fn fedwake(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedwake")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn run_writes_metrics_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "config.json", CONFIG);
    let out_dir = dir.path().join("out");
    let out = fedwake(&["run", "--config", &config, "--output-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("target not reached in 6 rounds"));
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 7);
    let report = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
    for key in ["rounds_to_target", "dev_metric", "test_metric", "upload_mb_per_client", "config_echo"] {
        assert!(report.contains(&format!("\"{key}\"")), "missing {key}");
    }
}

#[test]
fn seed_flag_changes_the_run_and_workers_do_not() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "config.json", CONFIG);
    let run = |name: &str, extra: &[&str]| {
        let out_dir = dir.path().join(name);
        let mut args = vec!["run", "--config", &config, "--output-dir", out_dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        let out = fedwake(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(out_dir.join("metrics.csv")).unwrap()
    };
    let base = run("a", &[]);
    assert_eq!(base, run("b", &["--workers", "4"]));
    assert_ne!(base, run("c", &["--seed", "99"]));
}

#[test]
fn sweep_writes_one_block_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "config.json", CONFIG);
    let grid = write(dir.path(), "grid.json", r#"{"participation": [0.1, 0.5]}"#);
    let out_dir = dir.path().join("sweep");
    let out = fedwake(&["sweep", "--config", &config, "--grid", &grid, "--output-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("point,participation,round,"));
    assert_eq!(csv.lines().count(), 1 + 2 * 6);
}

#[test]
fn baseline_and_synthesize_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "config.json", CONFIG);
    let out_dir = dir.path().join("bl");
    let out = fedwake(&["baseline", "--config", &config, "--output-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("baseline.csv").exists());

    let fed = dir.path().join("fed.jsonl");
    let out = fedwake(&["synthesize", "--config", &config, "--out", fed.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("40 users"));

    // Running on the saved federation reproduces the synthetic run.
    let loaded = CONFIG.replace(
        r#"{"synthesize": {"spec": {"user_count": 40, "size_mean": 15.0, "size_std": 6.0,
    "positive_rate": 0.2, "feature_dim": 4, "user_shift_scale": 0.5, "class_separation": 4.0}, "seed": 1}}"#,
        &format!(r#"{{"load": {{"path": {:?}}}}}"#, fed.to_str().unwrap()),
    );
    assert_ne!(loaded, CONFIG);
    let loaded = write(dir.path(), "loaded.json", &loaded);
    let a = dir.path().join("from_synth");
    let b = dir.path().join("from_file");
    assert!(fedwake(&["run", "--config", &config, "--output-dir", a.to_str().unwrap()]).status.success());
    assert!(fedwake(&["run", "--config", &loaded, "--output-dir", b.to_str().unwrap()]).status.success());
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn bad_inputs_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let missing = fedwake(&["run", "--config", "/no/such/config.json"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    let bad = write(dir.path(), "bad.json", &CONFIG.replace("\"participation\": 0.25", "\"participation\": 1.5"));
    let out = fedwake(&["run", "--config", &bad, "--output-dir", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("participation"));

    let typo = write(dir.path(), "typo.json", &CONFIG.replace("\"max_rounds\"", "\"max_round\""));
    assert!(!fedwake(&["run", "--config", &typo]).status.success());

    let config = write(dir.path(), "config.json", CONFIG);
    let grid = write(dir.path(), "grid.json", r#"{"participation": 0.1}"#);
    assert!(!fedwake(&["sweep", "--config", &config, "--grid", &grid]).status.success());
}
