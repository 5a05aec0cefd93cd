//! Subcommand behaviour: artifact checks, error reporting and determinism.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

const TINY: &str = "\
seed = 3
[dataset]
seq_len = 32
[model]
d_model = 16
n_layers = 1
n_heads = 2
dropout = 0.0
[train]
epochs = 2
batch_size = 4
";

fn supdis(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_supdis")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = supdis(dir, args);
    assert!(out.status.success(), "supdis {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
}

/// Exit code and `error.kind` of a failing run.
fn error_kind(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = supdis(dir, args);
    assert!(!out.status.success(), "supdis {} succeeded", args.join(" "));
    let v: Value = serde_json::from_slice(&out.stderr).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stderr)));
    (out.status.code().unwrap(), v["error"]["kind"].as_str().unwrap().to_string())
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(dir.path(), &["make-fixtures", "--binaries", "1", "--functions", "3", "-o", "fx"]);
    dir
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn missing_input_is_reported() {
    let dir = setup();
    assert_eq!(error_kind(dir.path(), &["superset", "fx/absent.elf", "-o", "x.jsonl"]), (1, "MissingInput".into()));
}

#[test]
fn usage_errors_exit_2() {
    let dir = setup();
    assert_eq!(error_kind(dir.path(), &["superset"]), (2, "Usage".into()));
    assert_eq!(error_kind(dir.path(), &["--task", "t9", "superset", "fx/prog00.elf"]), (2, "Usage".into()));
    assert_eq!(error_kind(dir.path(), &["superset", "fx/prog00.elf"]), (1, "Usage".into()));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.toml"), "[model]\nwidth = 3\n").unwrap();
    let (_, kind) = error_kind(dir.path(), &["--config", "bad.toml", "superset", "fx/prog00.elf", "-o", "s.jsonl"]);
    assert_eq!(kind, "InvalidConfig");
}

#[test]
fn wrong_artifact_kind_is_a_schema_mismatch() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["gt-entries", "fx/prog00.elf", "-o", "entries.json"]);
    let (_, kind) = error_kind(d, &["recover-blocks", "--pred", "entries.json", "--bin", "fx/prog00.elf", "-o", "m.json"]);
    assert_eq!(kind, "SchemaMismatch");
    let mut v = read_json(&d.join("entries.json"));
    v["schema_version"] = json!(99);
    std::fs::write(d.join("future.json"), v.to_string()).unwrap();
    let (_, kind) = error_kind(d, &["--task", "t1", "dataset", "--bin", "fx/prog00.elf", "--gt", "future.json", "-o", "x.jsonl"]);
    assert_eq!(kind, "SchemaMismatch");
    // Labels of one binary paired with another.
    let (_, kind) = error_kind(d, &["--task", "t1", "dataset", "--bin", "fx/discard_moves.elf", "--gt", "entries.json", "-o", "x.jsonl"]);
    assert_eq!(kind, "SchemaMismatch");
}

#[test]
fn vocabulary_mismatch_is_reported() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("narrow.toml"), format!("{TINY}\n").replace("seq_len = 32", "seq_len = 32\ndisp_lower = -64\ndisp_upper = 64")).unwrap();
    ok(d, &["gt-entries", "fx/prog00.elf", "-o", "entries.json"]);
    let dataset = |cfg: &str, out: &str| {
        ok(d, &["--config", cfg, "--task", "t1", "dataset", "--bin", "fx/prog00.elf", "--gt", "entries.json", "-o", out])
    };
    dataset("tiny.toml", "a/data.jsonl");
    dataset("narrow.toml", "b/data.jsonl");
    assert_ne!(std::fs::read(d.join("a/vocab.json")).unwrap(), std::fs::read(d.join("b/vocab.json")).unwrap());
    let (_, kind) = error_kind(d, &["--config", "tiny.toml", "train", "--data", "a/data.jsonl", "--vocab", "b/vocab.json", "-o", "m.bin"]);
    assert_eq!(kind, "VocabMismatch");
    ok(d, &["--config", "tiny.toml", "train", "--data", "a/data.jsonl", "-o", "m.bin"]);
    let (_, kind) = error_kind(d, &["predict", "--model", "m.bin", "--bin", "fx/prog00.elf", "--vocab", "b/vocab.json", "-o", "p.jsonl"]);
    assert_eq!(kind, "VocabMismatch");
}

#[test]
fn training_is_deterministic() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["gt-brel", "fx/prog00.elf", "-o", "brel.json"]);
    ok(d, &["--config", "tiny.toml", "--task", "t3", "dataset", "--bin", "fx/prog00.elf", "--gt", "brel.json", "-o", "data.jsonl"]);
    for m in ["m1.bin", "m2.bin"] {
        ok(d, &["--config", "tiny.toml", "train", "--data", "data.jsonl", "-o", m]);
    }
    assert_eq!(std::fs::read(d.join("m1.bin")).unwrap(), std::fs::read(d.join("m2.bin")).unwrap());
    assert_eq!(std::fs::read(d.join("m1.train.json")).unwrap(), std::fs::read(d.join("m2.train.json")).unwrap());
    let log = read_json(&d.join("m1.train.json"));
    assert_eq!(log["report"]["epochs"].as_array().unwrap().len(), 2);
    // Different worker counts produce the same predictions.
    ok(d, &["--workers", "1", "predict", "--model", "m1.bin", "--bin", "fx/prog00.elf", "-o", "p1.jsonl"]);
    ok(d, &["--workers", "3", "predict", "--model", "m1.bin", "--bin", "fx/prog00.elf", "-o", "p3.jsonl"]);
    assert_eq!(std::fs::read(d.join("p1.jsonl")).unwrap(), std::fs::read(d.join("p3.jsonl")).unwrap());
}

#[test]
fn recover_blocks_from_reference_predictions() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["gt-brel", "fx/discard_moves.elf", "-o", "brel.json"]);
    let labels = read_json(&d.join("brel.json"));
    let header = json!({
        "schema_version": 1, "kind": "pred", "task": "t3",
        "binary": labels["binary"], "sha256": labels["sha256"],
        "vocab_hash": "reference", "threshold": 0.5,
    });
    let mut text = format!("{header}\n");
    for off in [319, 331] {
        text.push_str(&format!("{}\n", json!({"offset": off, "vaddr": "0x0", "p1": 1.0, "verdict": true})));
    }
    std::fs::write(d.join("pred.jsonl"), text).unwrap();
    ok(d, &["recover-blocks", "--pred", "pred.jsonl", "--bin", "fx/discard_moves.elf", "-o", "mb.json"]);
    let mb = read_json(&d.join("mb.json"));
    let rendered: BTreeSet<&str> = mb["rendered"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(rendered, BTreeSet::from(["(-16)@discard_moves", "{8,16,24}@data"]));

    ok(d, &["gt-blocks", "fx/discard_moves.elf", "-o", "blocks_gt.json"]);
    ok(d, &["eval", "--blocks", "mb.json", "--blocks-gt", "blocks_gt.json", "-o", "report.json"]);
    assert!(read_json(&d.join("report.json")).is_object());
}

#[test]
fn superset_listing_ends_with_a_summary() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["superset", "fx/discard_moves.elf", "-o", "s.jsonl"]);
    let text = std::fs::read_to_string(d.join("s.jsonl")).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let summary = &lines.last().unwrap()["summary"];
    assert!(summary.is_object(), "last line {}", lines.last().unwrap());
    assert!(lines.iter().any(|l| l["offset"] == json!(319)));
}
