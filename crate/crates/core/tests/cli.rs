use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossing-profiler"))
        .args(args)
        .current_dir(cwd)
        .env("CROSSING_PROFILER_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let o = bin(args, cwd);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn synth_zero_writes_only_a_manifest() {
    let d = tempfile::tempdir().unwrap();
    ok(&["synth", "--count", "0", "--out", "raw"], d.path());
    let names: Vec<_> = fs::read_dir(d.path().join("raw")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec!["synth.run.json"]);
}

#[test]
fn synth_is_stable_per_seed() {
    let d = tempfile::tempdir().unwrap();
    ok(&["synth", "--count", "1", "--seed", "5", "--out", "a"], d.path());
    ok(&["synth", "--count", "1", "--seed", "5", "--out", "b"], d.path());
    let a = fs::read(d.path().join("a/crossing-000.csv")).unwrap();
    assert_eq!(a, fs::read(d.path().join("b/crossing-000.csv")).unwrap());
}

#[test]
fn prepare_needs_three_sources() {
    let d = tempfile::tempdir().unwrap();
    ok(&["synth", "--count", "2", "--out", "raw"], d.path());
    let o = bin(&["prepare", "--raw", "raw", "--out", "bundle"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 3 sources"));
    assert!(!d.path().join("bundle/manifest.json").exists());
}

#[test]
fn invalid_config_fails_before_work() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.json"), r#"{"plan": {"split_ratios": [0.5, 0.5, 0.5]}}"#).unwrap();
    let o = bin(&["--config", "c.json", "synth", "--count", "1", "--out", "raw"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(!d.path().join("raw").exists());
    assert!(String::from_utf8_lossy(&o.stderr).contains("split ratios"));

    fs::write(d.path().join("c.json"), r#"{"plan": {"sequence_length": 48}}"#).unwrap();
    ok(&["--config", "c.json", "synth", "--count", "0", "--out", "raw"], d.path());
}

#[test]
fn missing_checkpoint_exits_two_with_path() {
    let d = tempfile::tempdir().unwrap();
    let o = bin(&["predict", "--checkpoint", "absent.ckpt", "--input", "x.csv"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.ckpt"));
    assert_eq!(bin(&["frobnicate"], d.path()).status.code(), Some(2));
}

#[test]
fn train_predict_and_zero_learning_rate() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&["synth", "--count", "3", "--out", "raw"], p);
    ok(&["prepare", "--raw", "raw", "--out", "bundle", "--sequence-length", "32"], p);
    let small = ["--d-model", "4", "--lstm-hidden", "3", "--d-ff", "5", "--batch-size", "16"];
    let mut args = vec!["train", "--bundle", "bundle", "--out", "m", "--variant", "parallel", "--epochs", "3", "--lr", "0"];
    args.extend(small);
    ok(&args, p);
    let hist = fs::read_to_string(p.join("m/history.csv")).unwrap();
    let vals: Vec<&str> = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(vals.len(), 3);
    assert!(vals.iter().all(|v| *v == vals[0]), "{hist}");
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("m/train.run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["model"]["variant"], "ParallelLstmTransformer");

    let input = "bundle/aligned/crossing-000.csv";
    ok(&["predict", "--checkpoint", "m/model.ckpt", "--input", input, "--out", "p1"], p);
    ok(&["predict", "--checkpoint", "m/model.ckpt", "--input", input, "--out", "p2"], p);
    let a = fs::read_to_string(p.join("p1/prediction.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(p.join("p2/prediction.csv")).unwrap());
    assert_eq!(a.lines().count(), 33);
    assert!(a.starts_with("position_m,predicted_m,ground_truth_m\n"));

    // Drop the target column: prediction still succeeds, without ground truth.
    let text = fs::read_to_string(p.join(input)).unwrap();
    let stripped: String = text.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n").collect();
    fs::write(p.join("no_truth.csv"), stripped).unwrap();
    let o = ok(&["predict", "--checkpoint", "m/model.ckpt", "--input", "no_truth.csv", "--output", "-"], p);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("position_m,predicted_m\n"));
    assert_eq!(out.lines().count(), 33);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ground_truth_m omitted"));

    // Malformed input reports the line.
    let lines: Vec<&str> = text.lines().collect();
    let mut bad = lines.clone();
    let broken = bad[3].replacen(',', ",abc", 1);
    bad[3] = &broken;
    fs::write(p.join("bad.csv"), bad.join("\n")).unwrap();
    let o = bin(&["predict", "--checkpoint", "m/model.ckpt", "--input", "bad.csv", "--out", "p3"], p);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 4"), "{}", String::from_utf8_lossy(&o.stderr));
}
