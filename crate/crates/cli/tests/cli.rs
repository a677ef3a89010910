use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_patchbert");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn patchbert")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "`patchbert {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn solve_weights_prints_closed_form() {
    assert_eq!(ok(&["solve-weights", "0.9", "0.5", "0.1"]), "0.395444 0.314917 0.289639\n");
    assert_eq!(ok(&["solve-weights", "0.5", "0.5", "0.5"]), "0.333333 0.333333 0.333333\n");
}

#[test]
fn solve_weights_verify_reports_oracle_gap() {
    let out = ok(&["solve-weights", "--verify", "0.2", "0.7", "0.0", "0.95"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("oracle "), "{out}");
    let gap: f64 = lines[1].rsplit(' ').next().unwrap().parse().unwrap();
    assert!(gap <= 1e-6);
}

#[test]
fn bad_invocations_fail_with_one_line() {
    for args in [
        vec!["--bogus"],
        vec!["solve-weights", "1.5", "0.2"],
        vec!["eval", "--corpus", "/nonexistent", "--vocab", "/nonexistent", "--checkpoint", "/nonexistent"],
        vec!["pretrain", "--weighting", "sometimes"],
        vec!["--profile", "huge", "solve-weights", "0.1"],
    ] {
        let out = run(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with("error"), "{args:?}: {err}");
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rat = 0.1\n").unwrap();
    let out = run(&["--config", p(&cfg), "gen-data", "--out", p(&dir.path().join("c"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn smoke_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (corpus, vocab_dir, train, eval, bench) = (
        root.join("corpus"),
        root.join("vocab"),
        root.join("train"),
        root.join("eval"),
        root.join("bench"),
    );
    ok(&["gen-data", "--seed", "3", "--count", "300", "--out", p(&corpus)]);
    for f in ["products.txt", "train.txt", "val.txt", "test.txt", "gen-data.manifest"] {
        assert!(corpus.join(f).exists(), "{f}");
    }
    ok(&["build-vocab", "--corpus", p(&corpus), "--out", p(&vocab_dir)]);
    let vocab = vocab_dir.join("vocab.txt");
    let summary = ok(&[
        "pretrain", "--seed", "3", "--corpus", p(&corpus), "--vocab", p(&vocab), "--steps", "20", "--out", p(&train),
    ]);
    assert!(summary.contains("weighting=adaptive steps=20"), "{summary}");
    let log = std::fs::read_to_string(train.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);
    let ckpt = train.join("model.ckpt");
    let report = ok(&[
        "eval", "--corpus", p(&corpus), "--vocab", p(&vocab), "--checkpoint", p(&ckpt), "--queries", "10",
        "--distractors", "20", "--out", p(&eval),
    ]);
    assert_eq!(report.lines().count(), 2);
    assert!(report.starts_with("direction=image-to-text accuracy="), "{report}");
    let csv = std::fs::read_to_string(eval.join("report.csv")).unwrap();
    assert!(csv.starts_with("direction,accuracy,rank1,rank5,rank10,queries\n"));
    let out = ok(&[
        "bench-vsl", "--corpus", p(&corpus), "--vocab", p(&vocab), "--checkpoint", p(&ckpt), "--repetitions", "1",
        "--batch-size", "4", "--out", p(&bench),
    ]);
    assert!(out.starts_with("mode,batch_size,mean_ms,p50_ms,p95_ms\npadded,4,"), "{out}");
    assert!(out.lines().any(|l| l.starts_with("speedup=")));
}
