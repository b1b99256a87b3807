use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmkd::synth::DatasetConfig;

fn cmkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmkd"))
        .args(args)
        .env("CMD_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = cmkd(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small dataset plus a short-run config in `root`.
fn workspace(root: &Path, iterations: usize) -> PathBuf {
    let mut data = DatasetConfig::desk_default();
    data.height = 32;
    data.width = 32;
    data.layout.radius_range = [3.0, 5.5];
    data.modalities[0].count = 10;
    data.modalities[1].count = 5;
    let cfg = serde_json::json!({
        "dataset": "data",
        "data": data,
        "training": {
            "max_iterations": iterations,
            "validation_interval": 2,
            "snapshot_interval": 2,
            "base_lr": 1e-3
        }
    });
    let path = root.join("cfg.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    ok(&[
        "gen-data",
        "--config",
        path.to_str().unwrap(),
        "--out",
        root.join("data").to_str().unwrap(),
    ]);
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_eval_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = workspace(tmp.path(), 4);
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--setting",
        "ours",
        "--config",
        s(&cfg),
        "--seed",
        "1",
        "--out",
        s(&run),
    ]);
    for f in [
        "checkpoint/arch.json",
        "train_log.csv",
        "validation.csv",
        "confusion.txt",
        "run.json",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let eval = tmp.path().join("eval");
    ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint")),
        "--split",
        "test",
        "--out",
        s(&eval),
    ]);
    let mut rdr = csv::Reader::from_path(eval.join("metrics.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["setting", "modality", "class", "metric", "mean", "std", "n"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let per_class: Vec<_> = rows
        .iter()
        .filter(|r| &r[3] == "dice" && r[2].parse::<usize>().is_ok())
        .collect();
    assert_eq!(
        per_class.len(),
        4 * 2,
        "{}",
        fs::read_to_string(eval.join("metrics.csv")).unwrap()
    );

    let curves = tmp.path().join("curves");
    ok(&["export-curves", "--log", s(&run), "--out", s(&curves)]);
    let kd = fs::read_to_string(curves.join("kd_curve.csv")).unwrap();
    assert_eq!(kd.lines().count(), 1 + 3, "header plus iterations 0, 2, 4");
    assert!(fs::read_to_string(curves.join("confusion_evolution.txt"))
        .unwrap()
        .contains("[|A-B|]"));
}

#[test]
fn single_value_sweep_matches_train() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = workspace(tmp.path(), 3);
    let run = tmp.path().join("run");
    let sweep = tmp.path().join("sweep");
    ok(&[
        "train",
        "--setting",
        "ours",
        "--config",
        s(&cfg),
        "--seed",
        "2",
        "--out",
        s(&run),
    ]);
    ok(&[
        "sweep-alpha",
        "--config",
        s(&cfg),
        "--values",
        "0.5:0.5:0.5",
        "--seed",
        "2",
        "--out",
        s(&sweep),
    ]);
    let dirs: Vec<_> = fs::read_dir(&sweep)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1);
    for f in [
        "train_log.csv",
        "validation.csv",
        "confusion.txt",
        "run.json",
        "checkpoint/arch.json",
    ] {
        assert_eq!(
            fs::read(run.join(f)).unwrap(),
            fs::read(dirs[0].join(f)).unwrap(),
            "{f}"
        );
    }
    let table = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn compare_settings_reports_parameter_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = workspace(tmp.path(), 2);
    let out = tmp.path().join("cmp");
    ok(&[
        "compare-settings",
        "--config",
        s(&cfg),
        "--seeds",
        "1",
        "--out",
        s(&out),
    ]);
    let mut rdr = csv::Reader::from_path(out.join("params.csv")).unwrap();
    let totals: std::collections::BTreeMap<String, usize> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap())
        })
        .collect();
    assert_eq!(totals.len(), 7);
    assert_eq!(totals["individual"], 2 * totals["joint"]);
    assert!(totals["joint"] < totals["ours"] && totals["ours"] < totals["x"]);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(
        summary
            .lines()
            .filter(|l| l.starts_with("setting,"))
            .count(),
        1
    );
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = workspace(tmp.path(), 1);
    let code = |args: &[&str]| cmkd(args).status.code().unwrap();
    let run = s(&tmp.path().join("r")).to_string();

    assert_eq!(
        code(&[
            "train",
            "--setting",
            "bogus",
            "--config",
            s(&cfg),
            "--out",
            &run
        ]),
        3
    );

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"dataset": "data", "trainnig": {}}"#).unwrap();
    assert_eq!(
        code(&[
            "train",
            "--setting",
            "ours",
            "--config",
            s(&bad),
            "--out",
            &run
        ]),
        4
    );
    fs::write(
        &bad,
        r#"{"dataset": "data", "training": {"temperature": 0.5}}"#,
    )
    .unwrap();
    assert_eq!(
        code(&[
            "train",
            "--setting",
            "ours",
            "--config",
            s(&bad),
            "--out",
            &run
        ]),
        4
    );

    let missing = tmp.path().join("nope.json");
    assert_eq!(
        code(&[
            "train",
            "--setting",
            "ours",
            "--config",
            s(&missing),
            "--out",
            &run
        ]),
        5
    );
    assert_eq!(
        code(&[
            "train",
            "--setting",
            "ours",
            "--config",
            s(&cfg),
            "--dataset",
            "/nonexistent",
            "--out",
            &run
        ]),
        5
    );
    assert_eq!(
        code(&["eval", "--checkpoint", "/nonexistent", "--out", &run]),
        5
    );
    assert_eq!(code(&["train", "--setting", "ours"]), 2);
}
