use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mismatch_lab::harness::{ExperimentConfig, RunLog};
use mismatch_lab::toyenv::{EnvSpec, Predicate, SyntheticTask};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mismatch-lab")).args(args).env_remove("MISMATCH_LAB_SEED").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_small_config(dir: &Path) -> std::path::PathBuf {
    let out = lab(&["default-config"]);
    assert!(out.status.success());
    let mut cfg = ExperimentConfig::from_json_str(&stdout(&out)).unwrap();
    cfg.env = EnvSpec::Synthetic(SyntheticTask {
        vocab_size: 3,
        max_response_length: 10,
        num_prompts: 6,
        target_predicate: Predicate::Count,
        length_bias: 0.5,
    });
    cfg.batch_size = 6;
    cfg.rollouts_per_prompt = 4;
    cfg.total_steps = 8;
    cfg.eval_rollouts = 8;
    cfg.scheduler.eta_0 = 0.5;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn train_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = lab(&["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "metrics.jsonl", "runlog.json", "params.bin"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let log: RunLog = serde_json::from_str(&fs::read_to_string(out_dir.join("runlog.json")).unwrap()).unwrap();
    assert_eq!(log.records.len() as u64, log.summary.steps_run);
}

#[test]
fn seed_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_mismatch-lab"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()])
        .env("MISMATCH_LAB_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success());
    let log: RunLog = serde_json::from_str(&fs::read_to_string(out_dir.join("runlog.json")).unwrap()).unwrap();
    assert_eq!(log.config.seed, 99);

    let bad = Command::new(env!("CARGO_BIN_EXE_mismatch-lab"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()])
        .env("MISMATCH_LAB_SEED", "minus one")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn malformed_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"batch_size": 4, "surprise": true}"#).unwrap();
    let out = lab(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verification_commands_pass() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let theorem = lab(&["verify-theorem", "--out", d]);
    assert!(theorem.status.success());
    assert!(stdout(&theorem).contains("0 violations"));
    let rows = csv::Reader::from_path(dir.path().join("theorem_grid.csv")).unwrap().records().count();
    assert_eq!(rows, 180);
    let json: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("theorem_grid.json")).unwrap()).unwrap();
    assert_eq!(json.len(), 180);
    assert!(json[0]["theorem"]["Delta_max"].is_number());

    assert!(lab(&["verify-lemmas", "--out", d]).status.success());
    assert!(lab(&["verify-appendix-a", "--samples", "20000"]).status.success());
    assert!(lab(&["gradcheck", "--triples", "12"]).status.success());
}

#[test]
fn failed_verification_exits_nonzero() {
    let out = lab(&["gradcheck", "--triples", "4", "--step", "0.5", "--tol", "1e-9"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL"));
    let few = lab(&["verify-appendix-a", "--samples", "10"]);
    assert_eq!(few.status.code(), Some(2));
}

#[test]
fn unknown_suite_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(&["suite", "nonsense", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
}
