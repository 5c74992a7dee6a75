use std::path::Path;
use std::process::{Command, Output};

fn dmtci(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmtci"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn error_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("json error line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn unknown_key_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmtci(dir.path(), &["--set", "model.dimm=8", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["exit_code"], 2);
    assert_eq!(e["error"]["kind"], "unknown_config_key");
    assert!(e["error"]["message"].as_str().unwrap().contains("model.dimm"));
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmtci(dir.path(), &["--config", "/nonexistent/run.cfg", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["error"]["message"].is_string());
}

#[test]
fn bad_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dmtci(dir.path(), &["train", "--frobnicate"]).status.code(), Some(2));
}

#[test]
fn verify_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmtci(dir.path(), &["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert!(report["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true));
    assert!(dir.path().join("reproducibility-verify.json").exists());
    assert!(!dir.path().join(".dmtci.lock").exists());
}

#[test]
fn held_lock_refuses_a_second_writer() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".dmtci.lock"), "").unwrap();
    let o = dmtci(dir.path(), &["verify"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"]["kind"], "locked");
}

#[test]
fn eval_without_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmtci(dir.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["exit_code"], 1);
}

#[test]
fn gen_data_writes_manifest_lines() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmtci(dir.path(), &["--set", "data.size=60", "gen-data"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let corpus = dir.path().join("corpus");
    let manifests: Vec<_> = std::fs::read_dir(&corpus)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "jsonl"))
        .collect();
    assert!(!manifests.is_empty());
    let mut lines = 0;
    for m in manifests {
        for line in std::fs::read_to_string(m.path()).unwrap().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for key in ["id", "n_regions", "captions", "boc", "concepts", "counterexample"] {
                assert!(v.get(key).is_some(), "missing {key}");
            }
            lines += 1;
        }
    }
    assert_eq!(lines, 60);
}
