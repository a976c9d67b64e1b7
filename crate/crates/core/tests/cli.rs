use std::path::Path;
use std::process::{Command, Output};

fn smfgin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smfgin"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

#[test]
fn generate_data_writes_one_line_per_graph() {
    let dir = tempfile::tempdir().unwrap();
    let out = smfgin(dir.path(), &["generate-data", "--classes", "4", "--per-class", "30", "--seed", "1", "--out", "d.jsonl"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("d.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 120);
    let parsed = smfgin::graph::parse_dataset_str(&text, 16).unwrap();
    assert_eq!(parsed.len(), 120);
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = smfgin(dir.path(), &["grad-check", "--seed", "7", "--points", "2"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
}

#[test]
fn eval_without_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = smfgin(dir.path(), &["eval", "--checkpoint", "missing.json", "--out", "report.json"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");
    assert!(!dir.path().join("report.json").exists());
    assert!(!dir.path().join("report.json.tmp").exists());
}

#[test]
fn unknown_input_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = smfgin(dir.path(), &["fly"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = smfgin(dir.path(), &["train", "--bogus", "1", "--out", "x"]);
    assert!(!out.status.success());
    let out = smfgin(dir.path(), &["train", "--variant", "nope", "--out", "x"]);
    assert!(!out.status.success());
}

#[test]
fn config_file_with_flag_overrides_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(smfgin(d, &["generate-data", "--classes", "6", "--per-class", "24", "--test-classes", "3", "--seed", "2", "--out", "d.jsonl"])
        .status
        .success());
    std::fs::write(
        d.join("run.conf"),
        "# small run\ndataset = d.jsonl\nn = 2\nk = 2\nq = 3\nhidden_dim = 8\nnum_layers = 3\niterations = 40\nval_tasks = 5\nvariant = g\nglobal_attn = vanilla\n",
    )
    .unwrap();
    let out = smfgin(d, &["train", "--config", "run.conf", "--iterations", "6", "--validate-every", "3", "--out", "ck.json", "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ck = smfgin::train::Checkpoint::load(d.join("ck.json")).unwrap();
    assert_eq!(ck.branches[0].loss_trace.len(), 6);
    assert_eq!(ck.config.global_attn, "vanilla");

    let out = smfgin(d, &["eval", "--checkpoint", "ck.json", "--tasks", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["tasks"], 20);
    assert_eq!(report["per_task"].as_array().unwrap().len(), 20);
}
