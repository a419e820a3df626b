//! The `fairstamp` binary: exit codes, diagnostics, overrides and a small
//! run through every stage.

use std::path::Path;
use std::process::{Command, Output};

use fairstamp::stamp::save_stamp;
use fairstamp::FairnessStamp;
use serde_json::Value;

const SMALL: &str = r#"{
  "model": { "num_layers": 2, "model_dim": 16, "num_heads": 2, "vocab_size": 256,
             "max_seq_len": 16, "ffn_hidden_dim": 32 },
  "world": { "corpus_size": 400 },
  "train": { "steps": 30 },
  "edit": { "iterations_per_batch": 2, "d_c": 8 }
}"#;

fn fairstamp(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fairstamp"));
    cmd.current_dir(dir)
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("FAIRSTAMP_OUT")
        .env_remove("FAIRSTAMP_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn diagnostic(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("a diagnostic line");
    serde_json::from_str(line).expect("diagnostic is JSON")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn help_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = fairstamp(dir.path(), &["--help"], &[]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("--positions"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{ "modle": {} }"#).unwrap();
    std::fs::write(dir.path().join("ok.json"), "{}").unwrap();
    for args in [
        vec!["gen", "--config", "bad.json"],
        vec!["gen", "--config", "absent.json"],
        vec!["gen", "--config", "ok.json", "--layers", "1,x"],
        vec!["gen", "--config", "ok.json", "--layers", "9"],
        vec!["gen", "--config", "ok.json", "--positions", "tokens"],
        vec!["frobnicate", "--config", "ok.json"],
    ] {
        let out = fairstamp(dir.path(), &args, &[]);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert_eq!(diagnostic(&out)["error"], "usage", "{args:?}");
    }
    let out = fairstamp(dir.path(), &["gen", "--config", "ok.json"], &[("FAIRSTAMP_SEED", "x")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_dataset_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{ "data": { "bundle": "nowhere/bundle.jsonl", "template": [1] } }"#,
    )
    .unwrap();
    let out = fairstamp(dir.path(), &["gen", "--config", "cfg.json", "--out", "run"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let d = diagnostic(&out);
    assert_eq!(d["stage"], "gen");
    assert!(d["message"].as_str().unwrap().contains("nowhere/bundle.jsonl"), "{d}");
}

#[test]
fn stage_without_inputs_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    let out = fairstamp(dir.path(), &["eval", "--config", "cfg.json", "--out", "run"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(diagnostic(&out)["stage"], "eval");
}

#[test]
fn seed_precedence_is_file_env_flag() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), SMALL.replacen('{', r#"{ "seed": 1,"#, 1)).unwrap();
    let seeds = |envs: &[(&str, &str)], extra: &[&str], out: &str| {
        let mut args = vec!["gen", "--config", "cfg.json", "--out", out];
        args.extend_from_slice(extra);
        assert!(fairstamp(dir.path(), &args, envs).status.success());
        read_json(&dir.path().join(out).join("run_manifest.json"))["seeds"]["world"].clone()
    };
    assert_eq!(seeds(&[], &[], "a"), 1);
    assert_eq!(seeds(&[("FAIRSTAMP_SEED", "2")], &[], "b"), 2);
    assert_eq!(seeds(&[("FAIRSTAMP_SEED", "2")], &["--seed", "3"], "c"), 3);
    let out = fairstamp(dir.path(), &["gen", "--config", "cfg.json"], &[("FAIRSTAMP_OUT", "d")]);
    assert!(out.status.success());
    assert!(dir.path().join("d/data/bundle.jsonl").exists());
}

#[test]
fn small_run_through_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    let out = fairstamp(dir.path(), &["all", "--config", "cfg.json", "--out", "run"], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    for rel in [
        "data/bundle.jsonl",
        "data/corpus.jsonl",
        "base/weights.bin",
        "trace/location.json",
        "trace/layer_ie.csv",
        "trace/token_ie.csv",
        "edit/telemetry.csv",
        "edit/summary.json",
        "eval/report.json",
        "eval/report.csv",
        "continual/continual.json",
    ] {
        assert!(run.join(rel).exists(), "{rel} missing");
    }
    let summary = read_json(&run.join("edit/summary.json"));
    assert_eq!(summary["stamp_parameters"], 2 * 8 * 16);
    // 32 pairs in batches of 4, two iterations each.
    let telemetry = std::fs::read_to_string(run.join("edit/telemetry.csv")).unwrap();
    assert_eq!(telemetry.lines().count(), 1 + 8 * 2);
    let manifest = read_json(&run.join("run_manifest.json"));
    for stage in ["gen", "train-base", "trace", "edit", "eval", "continual"] {
        assert!(manifest["stages"][stage]["wall_ms"].is_number(), "{stage}");
    }
}

#[test]
fn zero_stamp_eval_retains_everything() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    for stage in ["gen", "train-base"] {
        let out = fairstamp(dir.path(), &[stage, "--config", "cfg.json", "--out", "run"], &[]);
        assert!(out.status.success());
    }
    let run = dir.path().join("run");
    let stamp = FairnessStamp::<f32>::new(1, 16, 8, 0).unwrap();
    save_stamp(&stamp, &run.join("edit/stamps/layer_01")).unwrap();
    let out = fairstamp(dir.path(), &["eval", "--config", "cfg.json", "--out", "run"], &[]);
    assert!(out.status.success());
    let edited = read_json(&run.join("eval/report.json"));
    let base = read_json(&run.join("eval/base_report.json"));
    assert_eq!(edited["rs"], 100.0);
    assert_eq!(edited["ss"], base["ss"]);
    assert_eq!(edited["icat"], base["icat"]);
}
