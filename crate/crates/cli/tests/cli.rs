//! The `mclrd` binary driven as a subprocess.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mclrd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mclrd")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mclrd(args);
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

const SMALL_SYNTH: &str = "source_per_class = 12\ntarget_per_class = 8\nk = 5\nclips = 6\nd_in = 16\n";
const SMALL_MODEL: &str = "d = 16\nhead_dim = 8\nd_ff = 32\nrank = 4\ndisc_hidden = 8\n\
                           pretrain_epochs = 2\nadapt_epochs = 1\nbatch_size = 8\n";

fn small_corpus(dir: &Path, preset: &str, seed: &str) {
    let cfg = dir.join("synth.cfg");
    fs::write(&cfg, SMALL_SYNTH).unwrap();
    ok(&["gen", "--preset", preset, "--seed", seed, "--out", s(&dir.join("data")), "--config", s(&cfg)]);
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    assert_eq!(mclrd(&["gen"]).status.code(), Some(2));
    assert_eq!(mclrd(&["pretrain", "--data", "x"]).status.code(), Some(2));
    assert_eq!(mclrd(&["pretrain", "--data", "x", "--out", "y", "--k", "3"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path(), "mixed", "0");
    let data = dir.path().join("data");
    let out = mclrd(&["eval", "--data", s(&data), "--ckpt", s(&dir.path().join("none.ckpt")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    let out = mclrd(&["pretrain", "--data", s(&dir.path().join("nothing")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gen_is_deterministic_in_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let read = |sub: &str| {
        let root = dir.path().join(sub);
        let mut files: Vec<_> = fs::read_dir(root.join("features")).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        let mut bytes = fs::read(root.join("manifest.csv")).unwrap();
        for f in files {
            bytes.extend(fs::read(f).unwrap());
        }
        bytes
    };
    for (sub, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        ok(&["gen", "--preset", "shift-rgb", "--seed", seed, "--out", s(&dir.path().join(sub))]);
    }
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck", "--seed", "1"]);
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn full_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_corpus(root, "shift-rgb", "1");
    let data = root.join("data");
    let model_cfg = root.join("model.cfg");
    fs::write(&model_cfg, SMALL_MODEL).unwrap();

    ok(&["pretrain", "--data", s(&data), "--out", s(&root.join("pre")), "--seed", "1", "--config", s(&model_cfg)]);
    let pre_ckpt = root.join("pre/pretrained.ckpt");
    let metrics = fs::read_to_string(root.join("pre/pretrain_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let run_dir = |name: &str| root.join(name);
    for (name, extra) in [("full", None), ("noldd", Some("--no-ldd")), ("nolada", Some("--no-lada"))] {
        let mut args = vec!["adapt", "--data", s(&data), "--ckpt", s(&pre_ckpt)];
        let out = run_dir(name);
        args.extend(["--out", s(&out)]);
        args.extend(extra);
        ok(&args);
    }

    // Disabled terms log zero; the final row carries target accuracy.
    let csv = fs::read_to_string(run_dir("noldd").join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let dd = header.iter().position(|&h| h == "dd").unwrap();
    let acc = header.iter().position(|&h| h == "target_test_acc").unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.iter().all(|r| r[dd].parse::<f64>().unwrap() == 0.0));
    assert!(rows.last().unwrap()[acc].parse::<f64>().is_ok());
    assert!(rows[..rows.len() - 1].iter().all(|r| r[acc].is_empty()));

    // Same inputs and seed give the same checkpoint bytes.
    ok(&["adapt", "--data", s(&data), "--ckpt", s(&pre_ckpt), "--out", s(&run_dir("again"))]);
    assert_eq!(
        fs::read(run_dir("full").join("adapted.ckpt")).unwrap(),
        fs::read(run_dir("again").join("adapted.ckpt")).unwrap()
    );

    let ev = run_dir("eval");
    let stdout = ok(&["eval", "--data", s(&data), "--ckpt", s(&run_dir("full").join("adapted.ckpt")), "--out", s(&ev)]);
    assert!(stdout.contains("accuracy"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    let accuracy = json["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&accuracy));
    assert_eq!(json["n"].as_u64(), Some(15));
    assert_eq!(json["per_class"].as_array().unwrap().len(), 5);
    assert_eq!(json["heads"], "stream");
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "eval");
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);

    let pre_eval = run_dir("pre_eval");
    ok(&["eval", "--data", s(&data), "--ckpt", s(&pre_ckpt), "--out", s(&pre_eval)]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(pre_eval.join("eval.json")).unwrap()).unwrap();
    assert_eq!(json["heads"], "pretrain");

    // Shift analysis only accepts a model adapted without the alignment loss.
    let out = mclrd(&["analyze", "--data", s(&data), "--ckpt", s(&run_dir("full").join("adapted.ckpt")), "--out", s(&run_dir("an"))]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = ok(&["analyze", "--data", s(&data), "--ckpt", s(&run_dir("nolada").join("adapted.ckpt")), "--out", s(&run_dir("an"))]);
    let csv = fs::read_to_string(run_dir("an").join("shift.csv")).unwrap();
    assert_eq!(csv, stdout);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("stream,mmd,raw,std_err,n_source,n_target\n"));
}
