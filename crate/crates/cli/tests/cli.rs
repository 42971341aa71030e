//! End-to-end runs of the binary on a tiny configuration: every stage, the
//! exit-code contract, the directory lock and run-to-run determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icvlab::RunManifest;
use serde_json::{json, Value};

fn tiny_config(out: &Path) -> Value {
    json!({
        "description": "tiny end-to-end run",
        "model": { "n_layers": 2, "d_model": 16, "n_heads": 2, "d_mlp": 32, "vocab_size": 128, "max_seq_len": 160 },
        "task": { "train_size": 40, "eval_size": 12 },
        "pretrain": { "steps": 12, "batch_size": 2, "lr": 3e-3 },
        "pretrain_mix": { "simple_max_k": 4, "mixed_max_k": 2 },
        "live": { "k": 2, "epochs": 1, "batch_size": 2, "accumulation": 2 },
        "lora": { "rank": 2, "epochs": 1, "batch_size": 4 },
        "baselines": { "extraction_episodes": 4, "extraction_k": 2, "fv_dev_queries": 6, "pca_demos": 6 },
        "eval": { "similarity_queries": 6, "projection_queries": 4, "timing_prompts": 2, "timing_repeats": 3 },
        "seeds": { "root": 5 },
        "output_dir": out,
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

fn icvlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icvlab"))
        .args(args)
        .env("ICVLAB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = icvlab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn manifest(out: &Path, stage: &str) -> RunManifest {
    serde_json::from_slice(&std::fs::read(out.join(format!("{stage}.manifest.json"))).unwrap()).unwrap()
}

fn with(cfg: &Value, key: &str, value: Value) -> Value {
    let mut c = cfg.clone();
    c[key] = value;
    c
}

#[test]
fn validate_reports_config_errors_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&dir.path().join("run"));
    let good = write_config(dir.path(), "good.json", &cfg);
    assert_eq!(run_ok(&["validate", "--config", good.to_str().unwrap()]).trim(), "ok");

    let mut unknown = cfg.clone();
    unknown["live"]["learning_rate"] = json!(0.1);
    let path = write_config(dir.path(), "unknown.json", &unknown);
    let out = icvlab(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let overflow = with(&cfg, "method", json!({ "name": "icl", "k": 64 }));
    let path = write_config(dir.path(), "overflow.json", &overflow);
    let out = icvlab(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("method.k = 64"));

    let out = icvlab(&["eval", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "stages validate before running");
    assert!(!dir.path().join("run").exists(), "nothing is written for an invalid config");

    let out = Command::new(env!("CARGO_BIN_EXE_icvlab"))
        .args(["validate", "--config", good.to_str().unwrap()])
        .env("ICVLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert!(out.status.success(), "validate does not start a thread pool");
    let out = Command::new(env!("CARGO_BIN_EXE_icvlab"))
        .args(["eval", "--config", good.to_str().unwrap()])
        .env("ICVLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_and_held_lock_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let path = write_config(dir.path(), "cfg.json", &tiny_config(&out_dir));
    let out = icvlab(&["eval", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing model checkpoint"));
    assert!(!out_dir.join(".icvlab.lock").exists(), "the lock is released on failure");

    std::fs::write(out_dir.join(".icvlab.lock"), b"").unwrap();
    let out = icvlab(&["pretrain", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
    assert!(!out_dir.join("model.ckpt").exists());
}

#[test]
fn every_stage_runs_and_reruns_reproduce_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = tiny_config(&out);
    let base = write_config(dir.path(), "base.json", &cfg);
    let base = base.to_str().unwrap();

    run_ok(&["pretrain", "--config", base]);
    let pre = manifest(&out, "pretrain");
    assert!(out.join("model.ckpt").is_file());
    assert!(pre.metrics["pretrain.final_loss"].is_finite());
    assert_eq!(pre.config_hash.len(), 64);
    assert!(pre.artifacts.contains(&PathBuf::from("metrics/pretrain.jsonl")));
    let lines = std::fs::read_to_string(out.join("metrics/pretrain.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 12);

    run_ok(&["train-live", "--config", base]);
    let live = manifest(&out, "train-live");
    assert_eq!(live.metrics["live.parameters"], 2.0 * 17.0);
    let steps = std::fs::read_to_string(out.join("metrics/train-live.jsonl")).unwrap();
    let first: Value = serde_json::from_str(steps.lines().next().unwrap()).unwrap();
    for key in ["step", "loss", "l_d", "l_gt"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    for kind in ["tv", "fv", "pca"] {
        run_ok(&["extract", kind, "--config", base]);
    }
    assert!(out.join("tables/sweep_tv.csv").is_file());
    assert!(out.join("tables/fv_head_scores.csv").is_file());
    run_ok(&["train-lora", "--config", base]);

    for (method, label) in [
        (json!({ "name": "zero_shot" }), "zero_shot"),
        (json!({ "name": "icl", "k": 2 }), "icl_k2"),
        (json!({ "name": "live" }), "live"),
        (json!({ "name": "tv" }), "tv"),
        (json!({ "name": "fv" }), "fv"),
        (json!({ "name": "pca_icv" }), "pca_icv"),
        (json!({ "name": "lora_head" }), "lora_head"),
    ] {
        let p = write_config(dir.path(), "eval.json", &with(&cfg, "method", method));
        run_ok(&["eval", "--config", p.to_str().unwrap()]);
        let m = manifest(&out, "eval");
        let acc = m.metrics[&format!("accuracy.{label}")];
        assert!((0.0..=1.0).contains(&acc));
        assert!(out.join(format!("tables/predictions_{label}.csv")).is_file());
    }
    let live_acc = manifest(&out, "train-live").metrics["accuracy.live"];

    for sweep in [
        json!({ "kind": "tv_layers" }),
        json!({ "kind": "fv_layers" }),
        json!({ "kind": "pca_strengths" }),
        json!({ "kind": "live_shots", "ks": [1, 2] }),
        json!({ "kind": "train_sizes", "sizes": [10, 40] }),
    ] {
        let p = write_config(dir.path(), "sweep.json", &with(&cfg, "sweep", sweep));
        run_ok(&["sweep", "--config", p.to_str().unwrap()]);
    }
    let shots = std::fs::read_to_string(out.join("tables/sweep_live_shots.csv")).unwrap();
    assert_eq!(shots.lines().next().unwrap(), "k,icl_accuracy,live_accuracy");
    assert_eq!(shots.lines().count(), 3);

    let vectors = json!([{ "name": "live" }, { "name": "tv" }, { "name": "fv" }, { "name": "pca_icv" }]);
    for analyze in [
        json!({ "kind": "similarity", "methods": vectors }),
        json!({ "kind": "bias", "methods": vectors }),
        json!({ "kind": "flops", "seq_lens": [1, 38] }),
        json!({ "kind": "timing", "methods": [{ "name": "zero_shot" }, { "name": "live" }] }),
        json!({ "kind": "project", "methods": vectors }),
        json!({ "kind": "decode" }),
    ] {
        let p = write_config(dir.path(), "analyze.json", &with(&cfg, "analyze", analyze));
        run_ok(&["analyze", "--config", p.to_str().unwrap()]);
    }
    for table in ["similarity", "bias", "flops", "timing", "projection", "decode_live"] {
        assert!(out.join(format!("tables/{table}.csv")).is_file(), "{table}");
    }
    let flops = manifest(&out, "analyze");
    assert!(flops.metrics.is_empty(), "the last analysis is decode");
    let timing: Value = serde_json::from_slice(&std::fs::read(out.join("analyze.manifest.json")).unwrap()).unwrap();
    assert!(timing["measurements"].is_object());

    let merge = json!({ "bundles": [out.join("live.bundle")], "tasks": [cfg["task"]] });
    let p = write_config(dir.path(), "merge.json", &with(&cfg, "merge", merge));
    run_ok(&["merge", "--config", p.to_str().unwrap()]);
    let merged = manifest(&out, "merge");
    let key = merged.metrics.keys().find(|k| k.ends_with(".general_live")).unwrap().clone();
    assert_eq!(merged.metrics[&key], live_acc, "merging one bundle changes nothing");

    // A second directory with the same config reproduces every metric.
    let again = dir.path().join("again");
    for stage in ["pretrain", "train-live"] {
        run_ok(&[stage, "--config", base, "--out", again.to_str().unwrap()]);
        assert_eq!(manifest(&again, stage).metrics, manifest(&out, stage).metrics, "{stage}");
    }
    let other = dir.path().join("other");
    run_ok(&["pretrain", "--config", base, "--out", other.to_str().unwrap(), "--seed", "6"]);
    assert_ne!(manifest(&other, "pretrain").metrics, pre.metrics);
}
