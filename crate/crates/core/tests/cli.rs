use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: [&str; 8] = ["--epochs", "4", "--hidden", "16", "--embed", "4", "--batch_size", "32"];

fn grace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grace"))
        .args(args)
        .env_remove("GRACE_SEED")
        .output()
        .expect("grace runs")
}

fn ok(args: &[&str]) -> Output {
    let out = grace(args);
    assert!(
        out.status.success(),
        "grace {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) -> PathBuf {
    let b = dir.join("bundle");
    ok(&[
        "synth", "--out", s(&b), "--p", "3", "--d", "8", "--n_obs", "300", "--n_per_intervention", "60", "--seed", "4",
    ]);
    b
}

fn train(bundle: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--bundle", s(bundle), "--out", s(out)];
    args.extend(TINY);
    args.extend(extra);
    ok(&args);
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth(dir.path());
    let run = dir.path().join("run");
    train(&b, &run, &[]);
    for f in ["config.cfg", "checkpoint.bin", "train_log.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);

    ok(&["eval", "--run", s(&run), "--bundle", s(&b), "--samples"]);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("intervention,n_real,n_gen,r2,rmse,mmd"));
    assert_eq!(lines.count(), 3);
    let oracle: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(oracle["perm"].as_array().unwrap().len(), 3);
    assert!(run.join("samples.csv").exists());

    let reports = dir.path().join("reports");
    ok(&["eval", "--run", s(&run), "--bundle", s(&b), "--out", s(&reports)]);
    assert_eq!(std::fs::read_to_string(reports.join("metrics.csv")).unwrap(), metrics);
    // Reports never overwrite an existing directory.
    let again = grace(&["eval", "--run", s(&run), "--bundle", s(&b), "--out", s(&reports)]);
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn bad_usage_exits_one_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bundle");
    let r = grace(&["synth", "--out", s(&out), "--warp", "9"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());

    let b = synth(dir.path());
    let run = dir.path().join("run");
    let r = grace(&["train", "--bundle", s(&b), "--out", s(&run), "--set", "warp=9"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("warp"));
    assert!(!run.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);

    let r = grace(&["train", "--bundle", s(&dir.path().join("missing")), "--out", s(&run)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!run.exists());

    assert_eq!(grace(&["--help"]).status.code(), Some(0));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth(dir.path());
    let b2 = dir.path().join("bundle2");
    ok(&[
        "synth", "--out", s(&b2), "--p", "3", "--d", "8", "--n_obs", "300", "--n_per_intervention", "60", "--seed", "4",
    ]);
    for e in std::fs::read_dir(&b).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(std::fs::read(b.join(&name)).unwrap(), std::fs::read(b2.join(&name)).unwrap(), "{name:?}");
    }
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    train(&b, &r1, &[]);
    train(&b2, &r2, &[]);
    for f in ["config.cfg", "checkpoint.bin", "train_log.csv"] {
        assert_eq!(std::fs::read(r1.join(f)).unwrap(), std::fs::read(r2.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn stopped_and_resumed_run_matches_a_straight_one() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth(dir.path());
    let straight = dir.path().join("straight");
    train(&b, &straight, &[]);
    let half = dir.path().join("half");
    train(&b, &half, &["--stop_after", "2"]);
    let log = std::fs::read_to_string(half.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let r = grace(&["train", "--bundle", s(&b), "--out", s(&dir.path().join("x")), "--resume", s(&half), "--lr", "0.1"]);
    assert_eq!(r.status.code(), Some(1));

    let done = dir.path().join("done");
    ok(&["train", "--bundle", s(&b), "--out", s(&done), "--resume", s(&half)]);
    for f in ["checkpoint.bin", "train_log.csv"] {
        assert_eq!(std::fs::read(straight.join(f)).unwrap(), std::fs::read(done.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn context_ablation_varies_only_the_edge_mask() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth(dir.path());
    let out = dir.path().join("abl");
    let mut args = vec!["ablate", "--bundle", s(&b), "--out", s(&out), "--axis", "context"];
    args.extend(TINY);
    ok(&args);
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    let masks: Vec<&str> = rows.iter().map(|r| r[3]).collect();
    assert_eq!(masks, ["GG", "GG+PG", "GG+PG+PP"]);
    let hashes: std::collections::HashSet<&str> = rows.iter().map(|r| r[4]).collect();
    assert_eq!(hashes.len(), 3);
    for r in &rows {
        assert_eq!(r[1], rows[0][1]);
        assert_eq!(r[2], rows[0][2]);
    }

    // Cell configs differ in the edge_mask line alone.
    let cfgs: Vec<String> = rows
        .iter()
        .map(|r| std::fs::read_to_string(out.join(r[0].replace('+', "_")).join("config.cfg")).unwrap())
        .collect();
    for c in &cfgs[1..] {
        let diff: Vec<(&str, &str)> = cfgs[0].lines().zip(c.lines()).filter(|(a, b)| a != b).collect();
        assert_eq!(diff.len(), 1, "{diff:?}");
        assert!(diff[0].0.starts_with("edge_mask"));
    }
    for r in &rows {
        assert!(out.join(r[0].replace('+', "_")).join("metrics.csv").exists());
    }
}

#[test]
fn dag_exports_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let b = synth(dir.path());
    let run = dir.path().join("run");
    train(&b, &run, &[]);
    let dot = ok(&["export-dag", "--run", s(&run), "--tau", "0"]);
    let dot = String::from_utf8(dot.stdout).unwrap();
    assert!(dot.starts_with("digraph"), "{dot}");
    let json_path = dir.path().join("dag.json");
    ok(&["export-dag", "--run", s(&run), "--format", "json", "--tau", "0", "--bundle", s(&b), "--out", s(&json_path)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(v["nodes"].as_array().unwrap().len(), 3);
    for e in v["edges"].as_array().unwrap() {
        assert!(e["source"].as_str().unwrap().starts_with('z'));
    }
}

#[test]
fn gradcheck_command_passes() {
    let out = ok(&["gradcheck"]);
    assert!(!out.stdout.is_empty());
}
