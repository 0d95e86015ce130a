use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedcspack::export::{read_metrics_csv, ACC_SERIES, BYTES_SERIES, PER_CLIENT};
use fedcspack::{emit_series, run, summarize_csv, ConfigDoc, ConfigError, RunOptions};
use serde_json::{json, Value};

fn small() -> Value {
    json!({
        "method": "fedcspack",
        "rounds": 3,
        "clients": 6,
        "cpr": 0.5,
        "local_epochs": 1,
        "lr": 0.1,
        "batch_size": 8,
        "pack": 16,
        "seed": 5,
        "partition": {"law": {"dirichlet": {"alpha": 1.0}}, "num_clients": 6, "seed": 1},
        "model": {"layer_dims": [[4, 8], [8, 3]], "activation": "relu"},
        "dataset": {"synthetic": {"num_classes": 3, "dim": 4, "samples_per_class": 30, "spread": 0.3, "seed": 2}}
    })
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedcspack"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_keys_are_rejected() {
    let mut v = small();
    v["lerning_rate"] = json!(0.1);
    let err = ConfigDoc::from_value(v).resolve().unwrap_err();
    assert!(matches!(err, ConfigError::Json { .. }));

    let mut v = small();
    v["partition"]["extra"] = json!(1);
    assert!(ConfigDoc::from_value(v).resolve().is_err());

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small());
    let out = cli(&[
        "run",
        "--config",
        s(&cfg),
        "--override",
        "model.depth=3",
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field `depth`"));
}

#[test]
fn clients_override_moves_partition_count() {
    let mut doc = ConfigDoc::from_value(small());
    doc.apply_overrides(&["clients=9"]).unwrap();
    let cfg = doc.resolve().unwrap();
    assert_eq!((cfg.clients, cfg.partition.num_clients), (9, 9));
}

#[test]
fn run_writes_every_file_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = cli(&[
            "run",
            "--config",
            s(&cfg),
            "--out",
            s(out),
            "--no-wall-clock",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "metrics.csv",
        "run.json",
        ACC_SERIES,
        BYTES_SERIES,
        PER_CLIENT,
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,method,global_acc,personalized_acc,bytes_up,bytes_down,wall_ms,participants,violations"
    );
    assert_eq!(lines.count(), 3);
    let per_client = fs::read_to_string(a.join(PER_CLIENT)).unwrap();
    assert_eq!(per_client.lines().count(), 1 + 6);

    let record: Value = serde_json::from_slice(&fs::read(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["config"], small_resolved());
    assert_eq!(record["rounds"].as_array().unwrap().len(), 3);
}

fn small_resolved() -> Value {
    let doc = ConfigDoc::from_value(small());
    serde_json::to_value(doc.resolve().unwrap()).unwrap()
}

#[test]
fn summary_recomputes_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let doc = ConfigDoc::from_value(small());
    let out = run(&doc, dir.path(), RunOptions::default()).unwrap();
    let summary = out.summary.unwrap();
    let again = summarize_csv(
        &dir.path().join("metrics.csv"),
        out.config.dense_bytes_per_round(),
    )
    .unwrap();
    assert_eq!(again, summary);
    let rows = read_metrics_csv(&dir.path().join("metrics.csv")).unwrap();
    assert!(rows
        .iter()
        .all(|r| r.participants == 3 && r.violations == 0));
}

#[test]
fn series_files() {
    let dir = tempfile::tempdir().unwrap();
    let files = emit_series(&[], dir.path()).unwrap();
    for f in &files {
        assert_eq!(
            fs::read_to_string(f).unwrap().lines().count(),
            1,
            "{}",
            f.display()
        );
    }
    let out = run(
        &ConfigDoc::from_value(small()),
        &dir.path().join("r"),
        RunOptions::default(),
    )
    .unwrap();
    let files = emit_series(&out.metrics, &dir.path().join("s")).unwrap();
    let counts: Vec<usize> = files
        .iter()
        .map(|f| fs::read_to_string(f).unwrap().lines().count())
        .collect();
    assert_eq!(counts, vec![4, 4, 7]);
}

#[test]
fn partition_report_lists_each_client() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small());
    let o = cli(&["partition-report", "--config", s(&cfg)]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("client") && lines[0].ends_with("c2"));
    let total: usize = lines[1..]
        .iter()
        .map(|l| {
            l.split_whitespace()
                .nth(1)
                .unwrap()
                .parse::<usize>()
                .unwrap()
        })
        .sum();
    assert_eq!(total, 90);
}

#[test]
fn idx_backed_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small());
    let (img, lbl) = (
        dir.path().join("train-images"),
        dir.path().join("train-labels"),
    );
    let o = cli(&[
        "export-idx",
        "--config",
        s(&cfg),
        "--images",
        s(&img),
        "--labels",
        s(&lbl),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let mut v = small();
    v["dataset"] = json!({"idx": {"images": "train-images", "labels": "train-labels"}});
    let cfg = write_config(dir.path(), &v);
    let o = cli(&[
        "run",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        read_metrics_csv(&dir.path().join("out/metrics.csv"))
            .unwrap()
            .len(),
        3
    );
}

#[test]
fn sweep_with_two_axes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small());
    let out = dir.path().join("sw");
    let o = cli(&[
        "sweep",
        "--config",
        s(&cfg),
        "--grid",
        "pack=8,1000",
        "--grid",
        "method=fedavg,fedcspack",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    assert!(summary.starts_with("cell,pack,method,label,"));
    assert!(out.join("pack=1000__method=fedavg/metrics.csv").exists());
}
