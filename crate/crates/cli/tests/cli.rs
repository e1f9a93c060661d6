use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn cntf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cntf"))
        .args(args)
        .env("CNTF_LOG_LEVEL", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cntf(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn preprocess_writes_vocab_and_examples() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["preprocess", "--input", s(&fixtures().join("train.jsonl")), "--output", s(dir.path())]);
    let vocab = fs::read_to_string(dir.path().join("vocab.txt")).unwrap();
    assert!(vocab.lines().count() > 4);
    let examples = fs::read_to_string(dir.path().join("train.examples.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(examples.lines().next().unwrap()).unwrap();
    assert_eq!(first["dialogue_id"], "syn00");
    assert!(first["target"].as_array().is_some_and(|t| !t.is_empty()));
    assert!(dir.path().join("train.jsonl").exists());
}

#[test]
fn preprocess_rejects_tiny_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let out = cntf(&["preprocess", "--input", s(&fixtures().join("train.jsonl")), "--output", s(dir.path()), "--vocab-size", "3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab-size"));
}

#[test]
fn triples_with_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("triples.tsv");
    ok(&[
        "triples",
        "--corpus",
        s(&fixtures().join("figure1.jsonl")),
        "--lexicon",
        s(&fixtures().join("lexicon.tsv")),
        "--annotations",
        s(&fixtures().join("annotations")),
        "--output",
        s(&out),
    ]);
    let body = fs::read_to_string(out).unwrap();
    assert!(body.contains("figure1\tMicheal Mann\tRelatedTo\tThe Last of the Mohicans\tentity_pair"));
    assert!(body.lines().all(|l| l.split('\t').count() == 5));
}

#[test]
fn missing_input_fails_cleanly() {
    let out = cntf(&["triples", "--corpus", "/nonexistent.jsonl", "--lexicon", "/nonexistent.tsv", "--output", "/tmp/x.tsv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    fs::create_dir(&corpus).unwrap();
    fs::copy(fixtures().join("train.jsonl"), corpus.join("train.jsonl")).unwrap();
    let triples = dir.path().join("triples.tsv");
    ok(&["triples", "--corpus", s(&corpus.join("train.jsonl")), "--lexicon", s(&fixtures().join("lexicon.tsv")), "--output", s(&triples)]);
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{"model": {"embed_dim": 8, "hidden_dim": 8, "encoder_layers": 1, "encoder_heads": 2},
            "train": {"epochs": 2, "batch_size": 8, "learning_rate": 0.001}}"#,
    )
    .unwrap();
    let ckpt = dir.path().join("ckpt");
    ok(&["train", "--config", s(&config), "--corpus", s(&corpus), "--triples", s(&triples), "--out", s(&ckpt)]);
    let log = fs::read_to_string(ckpt.join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "train_loss", "valid_loss", "seconds"] {
        assert!(lines[0].get(key).is_some(), "log lacks {key}");
    }

    let hyp = dir.path().join("hyp.txt");
    let reference = dir.path().join("ref.txt");
    fs::write(&hyp, "the cat sat on the mat\nhello there\n").unwrap();
    fs::write(&reference, "the cat sat on the mat\nhello\n").unwrap();
    let out = ok(&[
        "eval",
        "--hyp",
        s(&hyp),
        "--ref",
        s(&reference),
        "--model",
        s(&ckpt),
        "--corpus",
        s(&corpus.join("train.jsonl")),
        "--triples",
        s(&triples),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["ppl"].as_f64().unwrap() >= 1.0);
    let f1 = report["f1"].as_f64().unwrap();
    assert!(f1 > 0.5 && f1 <= 1.0);
}

#[test]
fn train_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"trian": {}}"#).unwrap();
    let out = cntf(&["train", "--config", s(&config), "--corpus", s(&fixtures()), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
}

#[test]
fn eval_rejects_misaligned_files() {
    let dir = tempfile::tempdir().unwrap();
    let hyp = dir.path().join("hyp.txt");
    let reference = dir.path().join("ref.txt");
    fs::write(&hyp, "a\nb\n").unwrap();
    fs::write(&reference, "a\n").unwrap();
    let out = cntf(&["eval", "--hyp", s(&hyp), "--ref", s(&reference)]);
    assert!(!out.status.success());
}
