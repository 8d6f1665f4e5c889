//! Drives the `mseqa` binary end to end.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn mseqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mseqa")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "version": 1,
  "data": { "n_passages": 8, "questions_per_passage": 12 },
  "encoder": { "layers": 1, "heads": 2, "hidden": 8, "ffn_dim": 16 },
  "training": { "epochs": 1, "batch_size": 8, "lr_peak": 0.001 }
}"#;

fn tiny_corpus(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let cfg = dir.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data.jsonl");
    let out = mseqa(&["gen-data", "--config", p(&cfg), "--seed", "7", "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (cfg, data)
}

#[test]
fn gen_data_is_reproducible_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, a) = tiny_corpus(dir.path());
    let b = dir.path().join("again.jsonl");
    assert!(mseqa(&["gen-data", "--config", p(&cfg), "--seed", "7", "--out", p(&b)]).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let c = dir.path().join("other.jsonl");
    assert!(mseqa(&["gen-data", "--config", p(&cfg), "--seed", "8", "--out", p(&c)]).status.success());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let out = mseqa(&["validate", "--data", p(&a)]);
    assert_eq!(out.status.code(), Some(0));

    let out = mseqa(&["stats", "--data", p(&a)]);
    assert_eq!(out.status.code(), Some(0));
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["passages"], 8);
    assert!(stats["question_prefixes"].as_object().is_some_and(|m| !m.is_empty()));
}

#[test]
fn validate_flags_a_corrupted_file() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = tiny_corpus(dir.path());
    let text = fs::read_to_string(&data).unwrap();
    let broken = text.replacen("\"full_text\":\"", "\"full_text\":\"X", 1);
    fs::write(&data, broken).unwrap();
    let out = mseqa(&["validate", "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);
}

#[test]
fn generate_train_evaluate_ask() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_corpus(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    let log = dir.path().join("train.jsonl");
    let out = mseqa(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ckpt), "--log", p(&log)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("model.ckpt.last").exists());

    let events: Vec<serde_json::Value> =
        fs::read_to_string(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(events.iter().any(|e| e["event"] == "step" && e["lr"].is_number() && e["grad_norm"].is_number()));
    assert_eq!(events.iter().filter(|e| e["event"] == "epoch").count(), 1);

    let report = dir.path().join("report.json");
    let out = mseqa(&["eval", "--data", p(&data), "--ckpt", p(&ckpt), "--report", p(&report), "--split", "all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let body: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(body["run_config"]["encoder"]["hidden"], 8);
    let r = &body["report"];
    for cell in ["single_span", "multi_span", "overall"] {
        for key in ["em", "f1"] {
            let v = r[cell][key].as_f64().unwrap();
            assert!((0.0..=100.0).contains(&v), "{cell}.{key} = {v}");
            assert_eq!((v * 10.0).round(), v * 10.0, "rounded to one decimal");
        }
    }
    for prf in ["multispan_classifier", "answer_type_classifier", "sentence_selection"] {
        for key in ["precision", "recall", "f1"] {
            assert!(r[prf][key].is_number(), "{prf}.{key}");
        }
    }
    let buckets: Vec<&String> = r["by_passage_length"].as_object().unwrap().keys().collect();
    assert_eq!(buckets, ["0-128", "128-256", "256-384", "384-512"]);
    assert!(r["by_span_count"].is_object());
    assert_eq!(r["n_examples"], r["overall"]["n"]);

    let out = mseqa(&["ask", "--ckpt", p(&ckpt), "--passage-file", p(&data), "--question", "What did Bob do?"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let answer: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(answer["kind"].is_string() && answer["spans"].is_array());

    let mut child = Command::new(env!("CARGO_BIN_EXE_mseqa"))
        .args(["ask", "--ckpt", p(&ckpt), "--passage-file", p(&data)])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"Where was Jenny?\n\nDid Bob cook?\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
}

#[test]
fn mismatched_vocab_hash_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = tiny_corpus(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    let log = dir.path().join("train.jsonl");
    assert!(mseqa(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ckpt), "--log", p(&log)])
        .status
        .success());

    let mut bytes = fs::read(&ckpt).unwrap();
    let key = b"\"vocab_hash\":\"";
    let at = bytes.windows(key.len()).position(|w| w == key).unwrap() + key.len();
    bytes[at] = if bytes[at] == b'0' { b'1' } else { b'0' };
    fs::write(&ckpt, bytes).unwrap();

    let report = dir.path().join("report.json");
    let out = mseqa(&["eval", "--data", p(&data), "--ckpt", p(&ckpt), "--report", p(&report)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("incompatible checkpoint"), "{err}");
    assert!(!report.exists());
}

#[test]
fn user_mistakes_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mseqa(&["--help"]).status.code(), Some(0));
    assert_eq!(mseqa(&["gen-data", "--bogus"]).status.code(), Some(1));
    assert_eq!(mseqa(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mseqa(&["stats", "--data", p(&dir.path().join("missing.jsonl"))]).status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"version": 1, "trainig": {}}"#).unwrap();
    let out = mseqa(&["gen-data", "--config", p(&bad), "--out", p(&dir.path().join("d.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);

    fs::write(&bad, r#"{"training": {}}"#).unwrap();
    let out = mseqa(&["gen-data", "--config", p(&bad), "--out", p(&dir.path().join("d.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
}
