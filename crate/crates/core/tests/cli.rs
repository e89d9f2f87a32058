use std::path::Path;
use std::process::{Command, Output};

fn dpq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpq"))
        .current_dir(dir)
        .env_remove("DPQ_SEED")
        .args(args)
        .output()
        .expect("spawn dpq")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = dpq(dir, args);
    assert!(
        out.status.success(),
        "dpq {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn train_small(dir: &Path) {
    ok(dir, &["--seed", "3", "train-toy", "--n", "512", "--epochs", "2", "--hidden", "48", "--out", "fp.dpq"]);
}

fn csv_value(text: &str, layer: &str, component: &str) -> f64 {
    text.lines()
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|f| f[0] == layer && f[1] == component)
        .map(|f| f[3].parse().unwrap())
        .unwrap_or_else(|| panic!("no {layer},{component} row"))
}

#[test]
fn dpq2_report_has_two_bits_per_value() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path());
    ok(
        dir.path(),
        &["quantize", "--in", "fp.dpq", "--method", "dpq", "--d", "4", "--k", "256", "--tau", "0.05", "--out", "q.dpq"],
    );
    let out = ok(dir.path(), &["report", "--model", "q.dpq"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("layer,component,bits,ratio\n"));
    let bits = text
        .lines()
        .find(|l| l.starts_with("1,bits_per_value,"))
        .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
        .unwrap();
    assert_eq!(bits, 2.0);
    assert_eq!(csv_value(&text, "1", "bits_per_value"), 16.0);
}

#[test]
fn indivisible_group_width_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path());
    let out = dpq(dir.path(), &["quantize", "--in", "fp.dpq", "--method", "pq", "--d", "5", "--out", "q.dpq"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("q.dpq").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dpq(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(dpq(dir.path(), &["report", "--bogus"]).status.code(), Some(1));
    assert_eq!(dpq(dir.path(), &["report", "--model", "absent.dpq"]).status.code(), Some(2));
    std::fs::write(dir.path().join("junk.dpq"), b"not a checkpoint").unwrap();
    assert_eq!(dpq(dir.path(), &["report", "--model", "junk.dpq"]).status.code(), Some(2));
    assert_eq!(dpq(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_sets_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "# toy run\nn = 256\nepochs = 1\nhidden = 24\n").unwrap();
    let out = ok(dir.path(), &["--config", "run.cfg", "train-toy", "--hidden", "48", "--out", "fp.dpq"]);
    let log = String::from_utf8(out.stderr).unwrap();
    let line = log.lines().find(|l| l.starts_with("resolved: ")).unwrap();
    assert!(line.contains("--n 256"), "{line}");
    assert!(line.contains("--epochs 1"), "{line}");
    assert!(line.contains("--hidden 48"), "{line}");
    let out = ok(dir.path(), &["report", "--model", "fp.dpq"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv_value(&text, "1", "total"), 1.0);

    std::fs::write(dir.path().join("bad.cfg"), "no_such_key = 3\n").unwrap();
    let out = dpq(dir.path(), &["--config", "bad.cfg", "report", "--model", "fp.dpq"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_dpq"))
        .current_dir(dir.path())
        .env("DPQ_SEED", "11")
        .args(["sample", "--model", "fp.dpq", "--steps", "5", "--n", "8", "--out", "a.csv"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("--seed 11"));
    ok(dir.path(), &["--seed", "11", "sample", "--model", "fp.dpq", "--steps", "5", "--n", "8", "--out", "b.csv"]);
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.csv")).unwrap());
    assert!(a.starts_with(b"x,y\n"));
}

#[test]
fn inputs_are_never_modified() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path());
    let before = std::fs::read(dir.path().join("fp.dpq")).unwrap();
    ok(dir.path(), &["quantize", "--in", "fp.dpq", "--method", "vq", "--k", "16", "--iters", "5", "--out", "q.dpq"]);
    let q_before = std::fs::read(dir.path().join("q.dpq")).unwrap();
    ok(
        dir.path(),
        &["calibrate", "--model", "q.dpq", "--original", "fp.dpq", "--n", "256", "--epochs", "1", "--out", "c.dpq"],
    );
    ok(dir.path(), &["trace", "--fp", "fp.dpq", "--q", "c.dpq", "--steps", "4", "--chains", "16", "--out", "t.csv"]);
    assert_eq!(std::fs::read(dir.path().join("fp.dpq")).unwrap(), before);
    assert_eq!(std::fs::read(dir.path().join("q.dpq")).unwrap(), q_before);
    let trace = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert!(trace.starts_with("layer,timestep,mode,l2\n"));
}
