use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bspde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bspde"))
        .args(args)
        .env_remove("BSPDE_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p
}

fn run_ok(config: &Path, out: &Path, extra: &[&str]) -> Value {
    let mut args = vec![
        "run",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let o = bspde(&args);
    assert!(o.status.success(), "run failed: {}", stderr(&o));
    serde_json::from_str(&std::fs::read_to_string(out.join("record.json")).unwrap()).unwrap()
}

const FEM8: &str = r#"{"kind": "fem-selftest", "n_cells": [8]}"#;

#[test]
fn fem_selftest_record_has_tiny_eigenvalue_residual() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "fem.json", FEM8);
    let rec = run_ok(&cfg, &tmp.path().join("out"), &[]);
    let r = rec["results"]["max_eigenvalue_residual"].as_f64().unwrap();
    assert!(r <= 1e-10, "residual {r}");
    assert_eq!(rec["kind"], "fem-selftest");
    for f in ["record.json", "table.csv", "table.md"] {
        assert!(tmp.path().join("out").join(f).exists(), "{f} missing");
    }
}

#[test]
fn manufactured_convergence_writes_three_errors_and_two_order_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "mms.json",
        r#"{"kind": "manufactured-convergence", "h": [0.125, 0.0625, 0.03125],
            "steps": 32, "beta": 1.0, "paths": 400, "seed": 3}"#,
    );
    let out = tmp.path().join("out");
    run_ok(&cfg, &out, &[]);
    let csv = std::fs::read_to_string(out.join("table.csv")).unwrap();
    let lines: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(lines.len(), 4, "{csv}");
    let header = &lines[0];
    let error_cols: Vec<usize> = (1..header.len())
        .filter(|&i| !header[i].ends_with(" se") && !header[i].ends_with(" order"))
        .collect();
    let order_cols: Vec<usize> = (1..header.len())
        .filter(|&i| header[i].ends_with(" order"))
        .collect();
    assert_eq!(error_cols.len(), 3);
    let rows_with_orders = lines[1..]
        .iter()
        .filter(|r| order_cols.iter().all(|&i| r[i].parse::<f64>().is_ok()))
        .count();
    assert_eq!(rows_with_orders, 2, "{csv}");
    assert!(lines[1..].iter().flatten().all(|c| !c.contains(' ')));
}

#[test]
fn negative_nu_is_rejected_before_computation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.json",
        r#"{"kind": "lq-train", "h": 0.25, "seed": 1,
            "problem": {"horizon": 0.2, "steps": 5, "nu": -0.01, "alphas": [1, 1, 1, 0.1],
                        "target": {"profile": "power", "exponent": -0.49}},
            "net": {"hidden": [4]},
            "train": {"iterations": 5, "batch_size": 8, "lr": 0.001}}"#,
    );
    let out = tmp.path().join("out");
    let o = bspde(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("problem.nu"), "{}", stderr(&o));
    assert!(
        !out.exists(),
        "nothing may be written for an invalid config"
    );
}

#[test]
fn unknown_keys_and_syntax_errors_are_located() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "a.json",
        "{\"kind\": \"fem-selftest\",\n \"n_cells\": [8], \"nope\": 2}",
    );
    let o = bspde(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("nope") && stderr(&o).contains("line 2"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn lq_train_writes_a_policy_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "train.json",
        r#"{"kind": "lq-train", "h": 0.25, "seed": 1, "residual_paths": 64,
            "problem": {"horizon": 0.2, "steps": 5, "nu": 0.01, "alphas": [1, 1, 1, 0.1],
                        "target": {"profile": "power", "exponent": -0.49}},
            "net": {"hidden": [4]},
            "train": {"iterations": 20, "batch_size": 16, "lr": 0.01}}"#,
    );
    let out = tmp.path().join("out");
    let rec = run_ok(&cfg, &out, &[]);
    assert!(out.join("policy.bin").exists());
    assert!(rec["results"]["relative_residual"]
        .as_f64()
        .unwrap()
        .is_finite());
}

fn fem_record(dir: &Path, n: usize) -> PathBuf {
    let cfg = write_config(
        dir,
        &format!("fem{n}.json"),
        &format!(r#"{{"kind": "fem-selftest", "n_cells": [{n}]}}"#),
    );
    let out = dir.join(format!("fem{n}"));
    run_ok(&cfg, &out, &[]);
    out.join("record.json")
}

fn mms_record(dir: &Path, h: &str) -> PathBuf {
    let cfg = write_config(
        dir,
        &format!("mms{h}.json"),
        &format!(
            r#"{{"kind": "manufactured-convergence", "h": [{h}], "steps": 24, "beta": 0.5, "paths": 200, "seed": 9}}"#
        ),
    );
    let out = dir.join(format!("mms{h}"));
    run_ok(&cfg, &out, &[]);
    out.join("record.json")
}

#[test]
fn report_of_one_record_has_dashes_for_orders() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = mms_record(tmp.path(), "0.125");
    let o = bspde(&["report", rec.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = md.lines().skip(2).collect();
    assert_eq!(rows.len(), 1, "{md}");
    assert_eq!(rows[0].matches("--").count(), 3, "{md}");
}

#[test]
fn report_of_two_records_gives_log2_order() {
    let tmp = tempfile::tempdir().unwrap();
    let fine = mms_record(tmp.path(), "0.0625");
    let coarse = mms_record(tmp.path(), "0.125");
    let o = bspde(&[
        "report",
        fine.to_str().unwrap(),
        coarse.to_str().unwrap(),
        "--csv",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .map(|c| c.parse().unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], 0.125, "sorted coarse to fine");
    let expected = (rows[0][1] / rows[1][1]).log2();
    assert!((rows[1][3] - expected).abs() < 1e-12, "{csv}");
}

#[test]
fn report_rejects_empty_and_mixed_inputs() {
    let o = bspde(&["report"]);
    assert!(!o.status.success());
    let tmp = tempfile::tempdir().unwrap();
    let a = fem_record(tmp.path(), 4);
    let b = mms_record(tmp.path(), "0.25");
    let o = bspde(&["report", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("mix"), "{}", stderr(&o));
}

#[test]
fn replay_of_fem_selftest_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = fem_record(tmp.path(), 8);
    let o = bspde(&["replay", rec.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn replay_with_altered_seed_is_flagged() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = mms_record(tmp.path(), "0.25");
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&rec).unwrap()).unwrap();
    v["config"]["seed"] = 10.into();
    std::fs::write(&rec, serde_json::to_string(&v).unwrap()).unwrap();
    let o = bspde(&["replay", rec.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("mismatch"), "{}", stderr(&o));
}

#[test]
fn replay_across_thread_counts_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "mms.json",
        r#"{"kind": "manufactured-convergence", "h": [0.25, 0.125], "steps": 24, "beta": 1.0, "paths": 300, "seed": 4}"#,
    );
    let out = tmp.path().join("out");
    run_ok(&cfg, &out, &["--threads", "1", "--reproducible"]);
    let rec = out.join("record.json");
    let o = bspde(&["replay", rec.to_str().unwrap(), "--threads", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let train = write_config(
        tmp.path(),
        "train.json",
        r#"{"kind": "lq-train", "h": 0.25, "seed": 2,
            "problem": {"horizon": 0.2, "steps": 4, "nu": 0.01, "alphas": [1, 1, 1, 0.1],
                        "target": {"profile": "power", "exponent": -0.49, "brownian": true}},
            "net": {"hidden": [3]},
            "train": {"iterations": 6, "batch_size": 300, "lr": 0.01}}"#,
    );
    let out2 = tmp.path().join("out2");
    run_ok(&train, &out2, &["--threads", "2", "--reproducible"]);
    let o = bspde(&[
        "replay",
        out2.join("record.json").to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}
