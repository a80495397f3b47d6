use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cuenmt::corpus::{read_samples, write_pairs, RawPair};
use cuenmt::evalbench::{ablation_table, make_control_task, run_ablation, AblationSpec, ControlSpec};
use cuenmt::nmt_model::{ModelConfig, Variant};
use cuenmt::trainer::TrainConfig;
use tempfile::TempDir;

const CONFIG: &str = r#"{
  "control": {"train_pairs": 240, "valid_pairs": 38, "test_pairs": 38,
              "variants_per_combination": 3, "heldout_variants_per_combination": 1},
  "train": {"learning_rate": 0.003, "warmup_steps": 10, "batch_tokens": 300, "max_epochs": 2},
  "model": {"d_model": 16, "heads": 2}
}"#;

fn cuenmt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cuenmt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn cuenmt")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = cuenmt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Temp dir holding `cfg.json` and a generated control task in `data/`.
fn control_dir(seed: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    ok(dir.path(), &["--config", "cfg.json", "--seed", seed, "control-task", "--out", "data"]);
    dir
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect()
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_twice_with_one_seed_gives_identical_metrics() {
    let dir = control_dir("5");
    let p = dir.path();
    for out in ["a", "b"] {
        ok(p, &["--config", "cfg.json", "--seed", "1", "train", "--variant", "mtcue", "--data", "data", "--out", out]);
    }
    let a = fs::read(p.join("a/metrics.csv")).unwrap();
    let b = fs::read(p.join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
    assert_eq!(fs::read(p.join("a/model.ckpt")).unwrap(), fs::read(p.join("b/model.ckpt")).unwrap());

    ok(p, &["--config", "cfg.json", "--seed", "2", "train", "--data", "data", "--out", "c"]);
    assert_ne!(fs::read(p.join("a/model.ckpt")).unwrap(), fs::read(p.join("c/model.ckpt")).unwrap());
}

#[test]
fn ablate_row_equals_direct_run_ablation() {
    let dir = control_dir("6");
    let p = dir.path();
    let out = ok(
        p,
        &["--config", "cfg.json", "--seed", "2", "ablate", "--flags", "random_context", "--data", "data", "--out", "ab"],
    );
    let tsv = fs::read_to_string(p.join("ab/ablation.tsv")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), tsv);

    let file: serde_json::Value = serde_json::from_str(CONFIG).unwrap();
    let spec: ControlSpec = serde_json::from_value(file["control"].clone()).unwrap();
    let tc: TrainConfig = serde_json::from_value(file["train"].clone()).unwrap();
    let task = make_control_task(&spec, 6).unwrap();
    let mut base = ModelConfig::desk(Variant::MtCue, 0, 0);
    base.d_model = 16;
    base.heads = 2;
    let flags = AblationSpec::parse("random_context").unwrap();
    let row = run_ablation(&flags, &base, &task.data, &task.vectorizer().unwrap(), &tc, 2).unwrap();
    assert_eq!(tsv, ablation_table(&[row]));
    assert_eq!(tsv.lines().count(), 2);
}

#[test]
fn store_and_vectorizer_paths_evaluate_identically() {
    let dir = control_dir("7");
    let p = dir.path();
    ok(p, &["--config", "cfg.json", "train", "--data", "data", "--out", "ck"]);
    ok(p, &["evaluate", "--model", "ck", "--data", "data", "--split", "zero_shot", "--out", "plain"]);
    ok(p, &["embed", "--data", "data"]);
    assert!(p.join("data/zero_shot.ctx.bin").exists());
    ok(p, &["evaluate", "--model", "ck", "--data", "data", "--split", "zero_shot", "--out", "stored"]);
    assert_eq!(
        fs::read(p.join("plain/hypotheses.txt")).unwrap(),
        fs::read(p.join("stored/hypotheses.txt")).unwrap()
    );
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("stored/evaluation.json")).unwrap()).unwrap();
    assert_eq!(eval["samples"], 38);
    assert!(eval["control"]["exact"].as_f64().unwrap() >= 0.0);
}

#[test]
fn commands_leave_their_inputs_untouched() {
    let dir = control_dir("8");
    let p = dir.path();
    ok(p, &["--config", "cfg.json", "train", "--data", "data", "--out", "ck"]);
    let data = snapshot(&p.join("data"));
    let ck = snapshot(&p.join("ck"));
    ok(p, &["evaluate", "--model", "ck", "--data", "data", "--out", "ev"]);
    ok(p, &["probe", "--model", "ck", "--data", "data", "--out", "pr", "--max-contexts", "20"]);
    ok(p, &["translate", "--model", "ck", "--src", "w1 w2", "--out", "tr/out.txt"]);
    assert_eq!(snapshot(&p.join("data")), data);
    assert_eq!(snapshot(&p.join("ck")), ck);

    let probe = fs::read_to_string(p.join("pr/probe.tsv")).unwrap();
    assert_eq!(probe.lines().next(), Some("context\tvector\tmarker\tnn_purity"));
    assert_eq!(probe.lines().count(), 21);
}

#[test]
fn translate_takes_inline_contexts() {
    let dir = control_dir("9");
    let p = dir.path();
    ok(p, &["--config", "cfg.json", "train", "--data", "data", "--out", "ck"]);
    let context = read_samples(p.join("data/test.jsonl")).unwrap()[0].meta[0].clone();
    let out = ok(p, &["translate", "--model", "ck", "--src", "w1 w2", "--src", "w3", "--meta", &context]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
    let m = manifest(&p.join("translate.manifest.json"));
    assert_eq!(m["config"]["meta"][0], context.as_str());

    let out = cuenmt(p, &["translate", "--model", "ck", "--src", "w1", "--meta", "a string missing from the table"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn prepare_builds_splits_vocabularies_and_manifest() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let mut pairs = Vec::new();
    for k in 0..10 {
        for i in 0..6 {
            pairs.push(RawPair {
                src: format!("source {k} {i}"),
                tgt: format!("target {k} {i}"),
                doc_key: format!("film{k}"),
                start_time: i as f64 * 2.0,
                overlap: 1.0,
            });
        }
    }
    write_pairs(p.join("pairs.jsonl"), &pairs).unwrap();
    let meta: String = (0..10).map(|k| format!("{{\"doc_key\": \"film{k}\", \"genre\": \"Drama\", \"year\": 1990}}\n")).collect();
    fs::write(p.join("meta.jsonl"), meta).unwrap();

    ok(p, &["--seed", "3", "prepare", "--in", "pairs.jsonl", "--meta", "meta.jsonl", "--out", "data", "--t", "2"]);
    let train = read_samples(p.join("data/train.jsonl")).unwrap();
    let valid = read_samples(p.join("data/valid.jsonl")).unwrap();
    let test = read_samples(p.join("data/test.jsonl")).unwrap();
    assert_eq!((train.len(), valid.len(), test.len()), (48, 6, 6));
    assert!(train.iter().all(|s| s.doc.len() <= 2 && !s.meta.is_empty()));
    for f in ["src.vocab", "tgt.vocab", "vectorizer.json"] {
        assert!(p.join("data").join(f).exists(), "{f}");
    }
    let info: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("data/data.json")).unwrap()).unwrap();
    assert_eq!(info["include_current"], true);
    let m = manifest(&p.join("data/prepare.manifest.json"));
    assert_eq!(m["command"], "prepare");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["t"], 2);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
    assert!(m["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    assert!(m.get("git_describe").is_some());

    ok(p, &["--seed", "3", "prepare", "--in", "pairs.jsonl", "--meta", "meta.jsonl", "--out", "again", "--t", "2"]);
    assert_eq!(fs::read(p.join("data/train.jsonl")).unwrap(), fs::read(p.join("again/train.jsonl")).unwrap());

    // the current sentence is stored at distance 0 ahead of the previous ones
    ok(p, &["embed", "--data", "data"]);
    let index = fs::read_to_string(p.join("data/train.ctx.idx")).unwrap();
    assert!(index.lines().all(|l| l.split('\t').nth(1).unwrap().starts_with("D:0:")));
    ok(p, &["embed", "--data", "data", "--exclude-current"]);
    let index = fs::read_to_string(p.join("data/train.ctx.idx")).unwrap();
    assert!(!index.contains("D:0:"));
    assert!(index.contains("D:2:"));

    ok(p, &["embed", "--data", "data"]);
    let small = ["--d-model", "16", "--heads", "2", "--epochs", "1", "--batch-tokens", "200"];
    ok(p, &[&["train", "--data", "data", "--out", "ck"][..], &small[..]].concat());
    let out = ok(p, &["translate", "--model", "ck", "--src", "source 1 2", "--doc", "source 1 1", "--meta", "Drama"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 1);
    assert_eq!(manifest(&p.join("translate.manifest.json"))["config"]["include_current"], true);
}

#[test]
fn exit_codes_separate_usage_and_data_errors() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    assert_eq!(cuenmt(p, &["--help"]).status.code(), Some(0));
    assert_eq!(cuenmt(p, &["frobnicate"]).status.code(), Some(1));

    let out = cuenmt(p, &["train", "--data", "data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init-from"), "subcommand help is printed");

    assert_eq!(cuenmt(p, &["train", "--data", "missing", "--out", "ck"]).status.code(), Some(2));
    assert_eq!(cuenmt(p, &["control-task", "--out", "x", "--preset", "nope"]).status.code(), Some(1));
    assert_eq!(
        cuenmt(p, &["ablate", "--data", "missing", "--flags", "no_such_flag"]).status.code(),
        Some(1)
    );
    assert_eq!(
        cuenmt(p, &["train", "--variant", "transformer", "--data", "d", "--out", "o"]).status.code(),
        Some(1)
    );
}

#[test]
fn control_task_ladder_writes_accuracy_per_level() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    fs::write(p.join("cfg.json"), CONFIG).unwrap();
    ok(
        p,
        &[
            "--config", "cfg.json", "control-task", "--out", "lad", "--ladder", "--levels", "0,full", "--variants",
            "mtcue,tagging", "--epochs", "1",
        ],
    );
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(p.join("lad/control_accuracy.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0]["supervision"], 0);
    assert!(rows[2]["supervision"].is_null());
    assert_eq!(rows[1]["variant"], "tagging");
    for r in &rows {
        let a = r["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&a));
    }
    let task: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("lad/task.json")).unwrap()).unwrap();
    assert_eq!(task["markers"].as_array().unwrap().len(), 38);
}
