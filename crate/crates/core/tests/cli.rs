use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use atn_core::tuner::read_dataset;

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn atn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atn")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tune_small(dir: &Path) -> PathBuf {
    let out = dir.join("tuned.csv");
    let o = atn(&[
        "--quiet",
        "--seed",
        "3",
        "--jobs",
        "1",
        "tune",
        "--batch",
        p(&scenarios().join("hub5_batch.json")),
        "--bounds",
        p(&scenarios().join("bounds.json")),
        "--budget",
        "12",
        "--rounds",
        "2",
        "--replications",
        "1",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn bad_od_row_exits_2_and_names_station() {
    let dir = tempfile::tempdir().unwrap();
    let mut s: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(scenarios().join("hub5.json")).unwrap()).unwrap();
    s["demand"]["od_matrix"][2] = serde_json::json!([0.3, 0.3, 0.0, 0.3, 0.3]);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, serde_json::to_string_pretty(&s).unwrap()).unwrap();
    let o = atn(&["simulate", "--scenario", p(&path)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("S2"), "{err}");
}

#[test]
fn missing_bounds_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = atn(&[
        "tune",
        "--batch",
        p(&scenarios().join("hub5_reference_batch.json")),
        "--bounds",
        p(&dir.path().join("absent.json")),
        "--out",
        p(&dir.path().join("x.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn budget_of_one_reports_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b1.csv");
    let o = atn(&[
        "--quiet",
        "tune",
        "--batch",
        p(&scenarios().join("hub5_reference_batch.json")),
        "--bounds",
        p(&scenarios().join("bounds.json")),
        "--budget",
        "1",
        "--rounds",
        "1",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success());
    let rows = read_dataset(std::fs::File::open(out).unwrap()).unwrap();
    assert_eq!(rows[0].objective, rows[0].baseline);
    assert_eq!(rows[0].params[8], f64::INFINITY);
    assert_eq!(rows[0].params[17], f64::INFINITY);
}

#[test]
fn train_predict_simulate_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = tune_small(dir.path());
    let model = dir.path().join("model.json");
    let test = dir.path().join("test.csv");
    let o = atn(&[
        "--quiet",
        "--seed",
        "3",
        "train",
        "--dataset",
        p(&data),
        "--k",
        "3",
        "--epochs",
        "50",
        "--out",
        p(&model),
        "--test-out",
        p(&test),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["test_accuracy"].as_f64().is_some());

    let params = dir.path().join("params.json");
    let o =
        atn(&["predict", "--model", p(&model), "--env", p(&scenarios().join("env_example.json")), "--out", p(&params)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = atn(&[
        "simulate",
        "--scenario",
        p(&scenarios().join("hub5.json")),
        "--params",
        p(&params),
        "--horizon",
        "1800",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let curve = dir.path().join("curve.csv");
    let o = atn(&[
        "evaluate",
        "--model",
        p(&model),
        "--test",
        p(&test),
        "--sigmas",
        "0,0.5",
        "--trials",
        "5",
        "--out",
        p(&curve),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(curve).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("cluster,sigma,success_rate,trials"));
    for line in lines {
        let rate: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&rate));
    }
}

#[test]
fn predict_rejects_two_hot_od_structure() {
    let dir = tempfile::tempdir().unwrap();
    let data = tune_small(dir.path());
    let model = dir.path().join("model.json");
    assert!(atn(&[
        "--quiet",
        "--seed",
        "3",
        "train",
        "--dataset",
        p(&data),
        "--k",
        "3",
        "--epochs",
        "5",
        "--out",
        p(&model)
    ])
    .status
    .success());
    let mut env: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(scenarios().join("env_example.json")).unwrap()).unwrap();
    env["od_structure"] = serde_json::json!([1.0, 1.0, 0.0, 0.0]);
    let path = dir.path().join("env.json");
    std::fs::write(&path, env.to_string()).unwrap();
    let o = atn(&["predict", "--model", p(&model), "--env", p(&path)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_with_fewer_rows_than_clusters_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = tune_small(dir.path());
    let text = std::fs::read_to_string(&data).unwrap();
    let short: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
    let path = dir.path().join("short.csv");
    std::fs::write(&path, short).unwrap();
    let o = atn(&["train", "--dataset", p(&path), "--k", "5", "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_writes_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("events.tsv");
    let o = atn(&[
        "simulate",
        "--scenario",
        p(&scenarios().join("two_station.json")),
        "--params",
        p(&scenarios().join("calling_only.json")),
        "--events",
        p(&events),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(metrics["full_trips"], 5);
    let log = std::fs::read_to_string(events).unwrap();
    assert!(log.starts_with("time\tkind\tvehicle\tfrom\tto\n"));
    assert!(log.lines().count() > 5);
}
