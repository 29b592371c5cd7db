use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
folds = 3
synth.n_patients = 45
synth.visit_count_mean = 7
synth.visit_count_sd = 2
forecaster.epochs = 2
annotator.epochs = 2
gibbs.n_samples = 8
eval.max_horizon = 2
eval.max_lag = 2
eval.sleeve_examples = 1
";

fn mmtraj(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmtraj"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mmtraj(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.kv"), TINY).unwrap();
    dir
}

#[test]
fn help_succeeds_and_usage_errors_exit_one() {
    let dir = setup();
    assert_eq!(mmtraj(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(mmtraj(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(mmtraj(dir.path(), &["run-cv", "--fold"]).status.code(), Some(1));
    assert_eq!(
        mmtraj(dir.path(), &["run-cv", "--config", "missing.kv"]).status.code(),
        Some(1)
    );
}

#[test]
fn bad_config_value_exits_one() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.kv"), "folds = many\n").unwrap();
    assert_eq!(
        mmtraj(dir.path(), &["split", "--config", "bad.kv"]).status.code(),
        Some(1)
    );
}

#[test]
fn malformed_cohort_exits_two() {
    let dir = setup();
    std::fs::write(dir.path().join("broken.csv"), "patient_id,visit_index\nP1,zero\n").unwrap();
    let out = mmtraj(dir.path(), &["ingest", "broken.csv", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn synth_then_ingest_round_trips() {
    let dir = setup();
    ok(dir.path(), &["synth", "--config", "tiny.kv", "--out", "a"]);
    ok(dir.path(), &["ingest", "a/cohort.csv", "--out", "b"]);
    let a = std::fs::read(dir.path().join("a/cohort.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/cohort.csv")).unwrap();
    assert_eq!(a, b);
    let excluded = std::fs::read_to_string(dir.path().join("b/exclusions.csv")).unwrap();
    assert_eq!(excluded.lines().count(), 1);
}

#[test]
fn synth_seed_flag_changes_cohort() {
    let dir = setup();
    ok(dir.path(), &["synth", "--config", "tiny.kv", "--out", "a"]);
    ok(
        dir.path(),
        &["synth", "--config", "tiny.kv", "--seed", "9", "--out", "b"],
    );
    let a = std::fs::read(dir.path().join("a/cohort.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/cohort.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn stepwise_commands_reproduce_run_cv_fold() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["run-cv", "--config", "tiny.kv", "--fold", "1", "--out", "run"]);
    let status = std::fs::read_to_string(d.join("run/fold_status.csv")).unwrap();
    assert!(status.contains("1,ok,"));
    assert!(status.contains("0,missing,"));

    let cohort = "run/cohort.csv";
    let common = ["--config", "tiny.kv", "--cohort", cohort, "--fold", "1", "--out", "m"];
    for cmd in ["split", "train-forecaster", "train-annotator", "calibrate"] {
        let mut args = vec![cmd];
        args.extend_from_slice(&common);
        ok(d, &args);
    }
    for file in [
        "folds.csv",
        "transform.csv",
        "forecaster.bin",
        "annotator.bin",
        "annotator_transform.csv",
    ] {
        let stepwise = std::fs::read(d.join("m").join(file)).unwrap();
        let bundled = match file {
            "folds.csv" => std::fs::read(d.join("run").join(file)).unwrap(),
            _ => std::fs::read(d.join("run/fold_1").join(file)).unwrap(),
        };
        assert_eq!(stepwise, bundled, "{file} differs");
    }
    let summary = |p: &Path| {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .take(2)
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(
        summary(&d.join("m/calibration.csv")),
        summary(&d.join("run/fold_1/calibration.csv"))
    );

    ok(
        d,
        &[
            "evaluate", "--config", "tiny.kv", "--cohort", cohort, "--fold", "1", "--model", "m", "--out", "e",
        ],
    );
    assert_eq!(
        std::fs::read(d.join("e/roc.csv")).unwrap(),
        std::fs::read(d.join("run/fold_1/roc.csv")).unwrap()
    );
}

#[test]
fn forecast_and_annotate_outputs() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["synth", "--config", "tiny.kv", "--out", "."]);
    let common = ["--config", "tiny.kv", "--cohort", "cohort.csv", "--out", "m"];
    for cmd in ["train-forecaster", "train-annotator", "calibrate"] {
        let mut args = vec![cmd];
        args.extend_from_slice(&common);
        ok(d, &args);
    }
    let mut args = vec!["forecast", "--horizon", "3"];
    args.extend_from_slice(&common);
    ok(d, &args);
    let forecast = std::fs::read_to_string(d.join("m/forecast.csv")).unwrap();
    let mut lines = forecast.lines();
    assert_eq!(
        lines.next(),
        Some("patient_id,step,feature,mean,lo95,hi95,mean_raw,lo95_raw,hi95_raw")
    );
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 45 * 3 * 10);
    for r in &rows {
        let v: Vec<f64> = r[3..].iter().map(|x| x.parse().unwrap()).collect();
        assert!(v[1] <= v[0] && v[0] <= v[2], "{r:?}");
        assert!(v[4] <= v[5], "{r:?}");
    }

    let mut args = vec!["annotate"];
    args.extend_from_slice(&common);
    ok(d, &args);
    let calibration = std::fs::read_to_string(d.join("m/calibration.csv")).unwrap();
    let threshold: f64 = calibration
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    let annotations = std::fs::read_to_string(d.join("m/annotations.csv")).unwrap();
    let mut lines = annotations.lines();
    assert_eq!(lines.next(), Some("patient_id,visit_index,pd_probability,pd_flag"));
    let mut n = 0;
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let p: f64 = f[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(f[3] == "1", p >= threshold);
        n += 1;
    }
    let cohort = std::fs::read_to_string(d.join("cohort.csv")).unwrap();
    assert_eq!(n, cohort.lines().count() - 1);
}

#[test]
fn report_regenerates_identically() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["run-cv", "--config", "tiny.kv", "--fold", "0", "--out", "run"]);
    let before = std::fs::read(d.join("run/report.md")).unwrap();
    ok(d, &["report", "--out", "run"]);
    assert_eq!(before, std::fs::read(d.join("run/report.md")).unwrap());
    assert_eq!(mmtraj(d, &["report", "--out", "nowhere"]).status.code(), Some(2));
}
