use std::path::Path;
use std::process::{Command, Output};

fn graphoscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphoscope"))
        .args(args)
        .env("GRAPHOSCOPE_THREADS", "1")
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_then_score_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = graphoscope(&["synth", "--writers", "8", "--pages", "2", "--page-size", "64", "--seed", "7", "--out", path(&corpus)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pages = walk_pngs(&corpus);
    assert_eq!(pages, 16);
    assert!(corpus.join("manifest.json").exists());
    assert!(corpus.join("run-manifest.json").exists());

    let train = dir.path().join("train");
    let out = graphoscope(&[
        "train", "--corpus", path(&corpus), "--out", path(&train), "--epochs", "1", "--folds", "2",
        "--batch-size", "8", "--writers-per-batch", "2", "--batches-per-epoch", "1", "--base-channels", "4",
        "--embedding-dim", "8", "--input-size", "32",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["fold-0.gscm", "fold-1.gscm", "model.gscm", "metrics.json", "run-manifest.json"] {
        assert!(train.join(f).exists(), "{f}");
    }
    let model = train.join("model.gscm");

    let score = dir.path().join("score");
    let out = graphoscope(&[
        "score", "--corpus", path(&corpus), "--model", path(&model), "--out", path(&score), "--technique",
        "random", "--min-ink", "1.0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no snippets ≥ min_ink"));

    let out = graphoscope(&[
        "score", "--corpus", path(&corpus), "--model", path(&model), "--out", path(&score), "--technique",
        "random", "--count", "2", "--steps", "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = std::fs::read(score.join("report.json")).unwrap();
    let out = graphoscope(&["replay", path(&score.join("run-manifest.json")), "--out", path(&dir.path().join("again"))]);
    assert!(out.status.success());
    assert_eq!(first, std::fs::read(dir.path().join("again/report.json")).unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(graphoscope(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(graphoscope(&["synth"]).status.code(), Some(1));
    assert_eq!(graphoscope(&["train", "--corpus", "x", "--out", "y", "--task", "zz"]).status.code(), Some(1));
    assert_eq!(graphoscope(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    // invalid configuration is a usage error too
    let out = graphoscope(&["synth", "--writers", "1", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = graphoscope(&["train", "--corpus", path(&dir.path().join("nope")), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

fn walk_pngs(root: &Path) -> usize {
    std::fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            if p.is_dir() {
                walk_pngs(&p)
            } else {
                usize::from(p.extension().is_some_and(|e| e == "png"))
            }
        })
        .sum()
}
