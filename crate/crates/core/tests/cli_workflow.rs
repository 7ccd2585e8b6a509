use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use protoscope::embedstore::{fit_normalizer, load_dataset, read_embedding_file};
use protoscope::trainer::load_checkpoint;

fn protoscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoscope"))
        .args(args)
        .env_remove("PROTOSCOPE_SEED")
        .output()
        .expect("spawn protoscope")
}

fn ok(args: &[&str]) -> String {
    let out = protoscope(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(dir_snapshot(&path));
        } else {
            out.push((path.display().to_string(), fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn synth_train_eval_on_defaults_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["synth-data", "--out", s(&data)]);
    let manifest = data.join("manifest.jsonl");
    let before = dir_snapshot(&data);

    ok(&["train", "--manifest", s(&manifest), "--out", s(&run)]);
    for name in ["checkpoint.pckp", "metrics.csv", "train.config"] {
        assert!(run.join(name).exists(), "{name}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,lr,l_c,l_p,total,val_total\n"));
    assert_eq!(metrics.lines().count(), 10_001);

    let checkpoint = run.join("checkpoint.pckp");
    ok(&["eval", "--checkpoint", s(&checkpoint), "--manifest", s(&manifest), "--out", s(&run)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["class_normalized_accuracy"], 1.0);
    assert!(fs::read_to_string(run.join("confusion.csv")).unwrap().lines().count() == 5);

    // nothing under the dataset directory was touched
    assert_eq!(dir_snapshot(&data), before);
}

#[test]
fn explain_export_self_check_and_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["synth-data", "--out", s(&data), "--per-class", "20", "--seed", "3"]);
    let manifest = data.join("manifest.jsonl");
    ok(&[
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&run),
        "--steps",
        "300",
        "--batch-size",
        "32",
        "--validate-every",
        "50",
        "--adaptor",
        "residual-mlp",
        "--prototypes-per-class",
        "3",
    ]);
    let checkpoint = run.join("checkpoint.pckp");

    ok(&[
        "explain",
        "--checkpoint",
        s(&checkpoint),
        "--manifest",
        s(&manifest),
        "--out",
        s(&run),
        "--top-k",
        "4",
    ]);
    let explained: Vec<_> = fs::read_dir(run.join("explain")).unwrap().collect();
    assert_eq!(explained.len(), 4 * 2);
    let one: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(run.join("explain").join("class_00_t0018.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(one["top"].as_array().unwrap().len(), 4);

    ok(&["export-protos", "--checkpoint", s(&checkpoint), "--out", s(&run), "--manifest", s(&manifest)]);
    let protos = run.join("protos");
    let index: serde_json::Value = serde_json::from_str(&fs::read_to_string(protos.join("index.json")).unwrap()).unwrap();
    let entries = index["prototypes"].as_array().unwrap();
    assert_eq!(entries.len(), 12);
    assert_eq!(entries[0]["nearest"].as_array().unwrap().len(), 5);
    let ck = load_checkpoint(&checkpoint).unwrap();
    assert_eq!(index["checkpoint_hash"], ck.content_hash().unwrap());
    // re-ingest and re-normalize recovers the adapted prototypes
    let z_p = ck.model.adapted_prototypes();
    let ds = load_dataset(&manifest).unwrap();
    assert_eq!(fit_normalizer(&ds).unwrap(), ck.normalizer);
    for e in entries {
        let m = e["index"].as_u64().unwrap() as usize;
        let back = read_embedding_file(protos.join(e["adapted_path"].as_str().unwrap())).unwrap();
        let renorm = ck.normalizer.apply(&back.segment_f64(0)).unwrap();
        for (a, b) in renorm.iter().zip(z_p.row(m)) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    let out = ok(&[
        "self-check",
        "--checkpoint",
        s(&checkpoint),
        "--out",
        s(&run),
        "--gradient-cases",
        "3",
        "--kmeans-instances",
        "10",
        "--seed",
        "2",
    ]);
    assert!(out.contains("PASS k-means oracle"), "{out}");
    assert!(out.contains("prototype self-classification"));
    assert!(run.join("self_check.json").exists());

    let out = ok(&["inspect-init", "--manifest", s(&manifest), "--prototypes-per-class", "2", "--out", s(&run)]);
    assert_eq!(out.lines().count(), 4);
    let init: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("init.json")).unwrap()).unwrap();
    assert_eq!(init.as_array().unwrap().len(), 4);
    assert_eq!(init[0]["prototype_center_distances"].as_array().unwrap().len(), 2);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth-data", "--out", s(&data), "--per-class", "20"]);
    let manifest = data.join("manifest.jsonl");
    let first = tmp.path().join("first");
    let config = tmp.path().join("base.config");
    fs::write(&config, "steps=200\nbatch_size=32\nvalidate_every=40\nlambda=0.5\nseed=11\n").unwrap();
    ok(&["train", "--manifest", s(&manifest), "--out", s(&first), "--config", s(&config), "--seed", "12"]);
    let echoed = fs::read_to_string(first.join("train.config")).unwrap();
    // flags beat the file
    assert!(echoed.contains("seed=12\n") && echoed.contains("lambda=0.5\n") && echoed.contains("steps=200\n"));

    let second = tmp.path().join("second");
    ok(&["train", "--config", s(&first.join("train.config")), "--out", s(&second)]);
    for name in ["checkpoint.pckp", "metrics.csv"] {
        assert_eq!(fs::read(first.join(name)).unwrap(), fs::read(second.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn seed_env_is_a_fallback() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str, env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_protoscope"));
        cmd.args(["synth-data", "--out", s(&tmp.path().join(dir)), "--per-class", "10"]);
        match env {
            Some(v) => cmd.env("PROTOSCOPE_SEED", v),
            None => cmd.env_remove("PROTOSCOPE_SEED"),
        };
        assert!(cmd.status().unwrap().success());
        fs::read(tmp.path().join(dir).join("blob_spec.json")).unwrap()
    };
    let env7 = run("a", Some("7"));
    let spec: serde_json::Value = serde_json::from_slice(&env7).unwrap();
    assert_eq!(spec["seed"], 7);
    assert_ne!(env7, run("b", None));
}

#[test]
fn failures_have_exit_codes_and_a_json_error_line() {
    let out = protoscope(&["eval", "--manifest", "m.jsonl", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let last: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(last["error"]["kind"], "usage");

    let out = protoscope(&["unknown-subcommand"]);
    assert_eq!(out.status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.pckp");
    fs::write(&bad, b"NOPE\x01\0\0\0").unwrap();
    let out = protoscope(&["export-protos", "--checkpoint", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let last: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(last["error"]["kind"], "format");
    assert_eq!(last["error"]["exit_code"], 1);
}
