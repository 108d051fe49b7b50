use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sctn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sctn")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_and_train(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let run = dir.join("run");
    let o = sctn(&["synth", "--out", s(&data), "--seed", "3", "--set", "synth_count=10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cache = data.join("segments.sctn");
    let o = sctn(&["train", "--data", s(&cache), "--out", s(&run), "--seed", "3", "--epochs", "2", "--batch", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (cache, run.join("checkpoint.sctn"))
}

#[test]
fn prepare_builds_cache_from_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("prep");
    let o = sctn(&["prepare", "--data", s(&fixture("ngsim_small.csv")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 13);
    let config = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(config.contains("units = feet"));
    assert!(out.join("segments.sctn").exists());
}

#[test]
fn train_evaluate_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let (cache, ckpt) = synth_and_train(dir.path());
    let run = ckpt.parent().unwrap();
    let log = std::fs::read_to_string(run.join("run_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.contains("\"train_loss\"") && l.contains("\"wall_ms\"")));
    assert!(std::fs::read_to_string(run.join("loss_trace.csv")).unwrap().starts_with("step,loss\n"));

    let eval = dir.path().join("eval");
    let o = sctn(&["evaluate", "--data", s(&cache), "--checkpoint", s(&ckpt), "--out", s(&eval)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = std::fs::read_to_string(eval.join("report.csv")).unwrap();
    assert_eq!(report.lines().filter(|l| l.starts_with("measured,")).count(), 5);
    assert!(report.lines().last().unwrap().starts_with("reference"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("not asserted"));

    let pred = dir.path().join("pred");
    let o = sctn(&[
        "predict", "--data", s(&cache), "--checkpoint", s(&ckpt), "--segment", "0", "--out", s(&pred),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dump = std::fs::read_to_string(pred.join("trajectories.csv")).unwrap();
    let mut lines = dump.lines();
    assert_eq!(lines.next(), Some("segment_id,agent,role,t,x,y"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let agents: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[1]).collect();
    for a in &agents {
        let count = |role: &str| rows.iter().filter(|r| r[1] == *a && r[2] == role).count();
        assert_eq!((count("obs"), count("gt"), count("pred")), (15, 25, 25), "agent {a}");
    }
    assert!(rows.iter().all(|r| r.len() == 6 && r[0] == "0"));

    let o = sctn(&[
        "predict", "--data", s(&cache), "--checkpoint", s(&ckpt), "--segment", "999", "--out", s(&pred),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn identical_runs_give_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, ca) = synth_and_train(a.path());
    let (_, cb) = synth_and_train(b.path());
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&ca), read(&cb));
    let trace = |c: &Path| read(&c.parent().unwrap().join("loss_trace.csv"));
    assert_eq!(trace(&ca), trace(&cb));
    assert_eq!(
        read(&a.path().join("data/segments.sctn")),
        read(&b.path().join("data/segments.sctn"))
    );
}

#[test]
fn usage_errors_exit_one() {
    let o = sctn(&["train"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--data"));
    assert_eq!(code(&sctn(&["frobnicate"])), 1);
    assert_eq!(code(&sctn(&["synth", "--no-such-flag"])), 1);
    assert_eq!(code(&sctn(&["synth", "--set", "no_such_key=1"])), 1);
    assert_eq!(code(&sctn(&["synth", "--profile", "huge"])), 1);
    assert_eq!(code(&sctn(&["--help"])), 0);
}

#[test]
fn config_file_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# comment\nseed = 4\nbogus = 1\n").unwrap();
    let o = sctn(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = sctn(&["prepare", "--data", s(&fixture("ngsim_bad_row.csv")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));
    let o = sctn(&["train", "--data", s(&dir.path().join("missing.sctn")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_at_desk_size() {
    let dir = tempfile::tempdir().unwrap();
    let o = sctn(&["gradcheck", "--profile", "desk", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
}
