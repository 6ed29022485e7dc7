//! End-to-end runs of the binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_clozeformer"));
    cmd.env_remove("CLOZEFORMER_CONFIG");
    cmd
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// build-vocab → pretrain → finetune seq2seq → generate → eval, with
/// paths relative to `dir`. Returns every command's stdout.
fn smoke_pipeline(dir: &Path) -> Vec<Vec<u8>> {
    let corpus = data("toy_corpus.txt");
    let pairs = data("toy_seq2seq.tsv");
    let text = fs::read_to_string(&pairs).unwrap();
    let (sources, refs): (Vec<&str>, Vec<&str>) = text.lines().map(|l| l.split_once('\t').unwrap()).unzip();
    fs::write(dir.join("src.txt"), sources.join("\n") + "\n").unwrap();
    fs::write(dir.join("ref.txt"), refs.join("\n") + "\n").unwrap();
    let (corpus, pairs) = (corpus.to_str().unwrap(), pairs.to_str().unwrap());
    let steps: [&[&str]; 6] = [
        &["build-vocab", "--corpus", corpus, "--out", "vocab.json"],
        &["pretrain", "--corpus", corpus, "--vocab", "vocab.json", "--steps", "50", "--seed", "3", "--out", "pre"],
        &["finetune", "--mode", "seq2seq", "--train", pairs, "--init", "pre", "--steps", "50", "--seed", "3", "--out", "ft"],
        &["generate", "--checkpoint", "ft", "--input", "src.txt", "--mode", "beam", "--out", "beam.txt"],
        &["generate", "--checkpoint", "ft/model.ckpt", "--input", "src.txt", "--mode", "sample", "--seed", "5"],
        &["eval", "--metric", "rougeL", "--hyp", "beam.txt", "--ref", "ref.txt"],
    ];
    steps.iter().map(|args| run_in(dir, args).stdout).collect()
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn smoke_pipeline_is_fast_and_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let start = Instant::now();
    let out_a = smoke_pipeline(a.path());
    assert!(start.elapsed() < Duration::from_secs(120), "{:?}", start.elapsed());
    let out_b = smoke_pipeline(b.path());
    assert_eq!(out_a, out_b);

    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    assert_eq!(fa.iter().map(|f| &f.0).collect::<Vec<_>>(), fb.iter().map(|f| &f.0).collect::<Vec<_>>());
    for ((name, x), (_, y)) in fa.iter().zip(&fb) {
        assert!(x == y, "{} differs between runs", name.display());
    }
    for name in ["pre/model.ckpt", "pre/optim.ckpt", "pre/metrics.jsonl", "ft/model.ckpt", "ft/head.ckpt", "beam.txt"] {
        assert!(a.path().join(name).exists(), "{name} missing");
    }
    let metrics = fs::read_to_string(a.path().join("pre/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 50);
    let report: serde_json::Value = serde_json::from_slice(&out_a[5]).unwrap();
    assert_eq!(report["metric"], "rougeL");
    assert_eq!(report["count"], 12);
    assert_eq!(String::from_utf8(out_a[4].clone()).unwrap().lines().count(), 12);
}

#[test]
fn vocabulary_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = data("toy_corpus.txt");
    run_in(dir.path(), &["build-vocab", "--corpus", corpus.to_str().unwrap(), "--out", "v.json"]);
    assert_eq!(fs::read(dir.path().join("v.json")).unwrap(), fs::read(data("golden/toy_vocab.json")).unwrap());
}

#[test]
fn inspect_mask_grid() {
    let out = run_in(Path::new("."), &["inspect-mask", "--objective", "seq2seq", "--src-len", "4", "--len", "8"]);
    let grid = String::from_utf8(out.stdout).unwrap();
    assert_eq!(grid, fs::read_to_string(data("golden/mask_seq2seq_src4_len8.txt")).unwrap());
    let row5: Vec<char> = grid.lines().nth(5).unwrap().chars().collect();
    assert_eq!(row5, "······xx".chars().collect::<Vec<_>>());

    let l2r = run_in(Path::new("."), &["inspect-mask", "--objective", "l2r", "--len", "3"]);
    assert_eq!(String::from_utf8(l2r.stdout).unwrap(), "·xx\n··x\n···\n");
}

#[test]
fn usage_errors_exit_one_with_usage_text() {
    let out = bin().args(["pretrain", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage:"));

    let out = bin().args(["inspect-mask", "--objective", "seq2seq", "--len", "8"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--src-len"));

    let out = bin().args(["inspect-mask", "--objective", "seq2seq", "--src-len", "8", "--len", "8"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin().args(["generate", "--checkpoint", "x", "--input", "y", "--beam", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--beam"));

    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_and_version_exit_zero() {
    for args in [&["--help"][..], &["--version"], &["pretrain", "--help"], &["generate", "--help"]] {
        let out = bin().args(args).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{args:?}");
    }
    let help = bin().args(["generate", "--help"]).output().unwrap();
    let text = String::from_utf8(help.stdout).unwrap();
    for flag in ["--checkpoint", "--mode", "--input", "--beam", "--topk", "--block-ngram", "--max-len", "--seed", "--max-src-len", "--config"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn data_errors_exit_two_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["eval", "--metric", "rouge1", "--hyp", "missing-hyp.txt", "--ref", "r.txt"]).current_dir(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing-hyp.txt"));

    fs::write(dir.path().join("h.txt"), "a b\n").unwrap();
    fs::write(dir.path().join("r.txt"), "a b\nc\n").unwrap();
    let out = bin().args(["eval", "--metric", "rouge1", "--hyp", "h.txt", "--ref", "r.txt"]).current_dir(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    let out = bin().args(["inspect-model", "--checkpoint", "bad.ckpt"]).current_dir(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.ckpt"));
}

#[test]
fn config_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = data("toy_corpus.txt");
    let vocab = data("golden/toy_vocab.json");
    fs::write(dir.path().join("bad.json"), r#"{"model": {"layerz": 1}}"#).unwrap();
    let args = ["pretrain", "--corpus", corpus.to_str().unwrap(), "--vocab", vocab.to_str().unwrap(), "--steps", "2", "--out", "o"];
    let out = bin().args(args).env("CLOZEFORMER_CONFIG", "bad.json").current_dir(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json") && err.contains("layerz"), "{err}");

    fs::write(dir.path().join("tiny.json"), r#"{"model": {"layers": 1, "hidden": 16, "heads": 2, "ff_inner": 32}}"#).unwrap();
    let out = bin().args(args).env("CLOZEFORMER_CONFIG", "tiny.json").current_dir(dir.path()).output().unwrap();
    assert!(out.status.success());
    let inspect = run_in(dir.path(), &["inspect-model", "--checkpoint", "o"]);
    let report: serde_json::Value = serde_json::from_slice(&inspect.stdout).unwrap();
    assert_eq!(report["config"]["layers"], 1);
    assert_eq!(report["config"]["hidden"], 16);
    assert_eq!(report["config"]["vocab_size"], 149);
}
