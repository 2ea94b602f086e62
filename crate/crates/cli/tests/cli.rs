use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_shiftdiag"));
    c.env_remove("SHIFTDIAG_THREADS").env("RUST_LOG", "warn");
    c
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fixture(name: &str) -> String {
    fixtures().join(name).to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn decompose(original: &str, replication: &str, extra: &[&str]) -> Output {
    let spec = fixture("example_spec.json");
    let mut args = vec!["decompose", "--original", original, "--replication", replication, "--spec", spec.as_str()];
    args.extend_from_slice(extra);
    run(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn rows(doc: &Value) -> Vec<(String, f64, f64, f64)> {
    doc["decomposition"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            let f = |k: &str| r[k].as_f64().unwrap();
            (r["name"].as_str().unwrap().to_string(), f("estimate"), f("ci_lo"), f("ci_hi"))
        })
        .collect()
}

/// Rewrite column `column` of a CSV through `f`.
fn edit_column(src: &str, column: &str, f: impl Fn(usize, &str) -> String) -> String {
    let text = fs::read_to_string(src).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let j = header.split(',').position(|h| h == column).unwrap();
    let mut out = format!("{header}\n");
    for (i, line) in lines.enumerate() {
        let mut cells: Vec<String> = line.split(',').map(str::to_string).collect();
        cells[j] = f(i, &cells[j]);
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[test]
fn example_one_matches_golden_document() {
    let o = decompose(&fixture("example1_original.csv"), &fixture("example1_replication.csv"), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let golden = fs::read(fixtures().join("example1_result.json")).unwrap();
    assert_eq!(o.stdout, golden);
}

#[test]
fn example_one_intervals() {
    let o = decompose(&fixture("example1_original.csv"), &fixture("example1_replication.csv"), &[]);
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    for (name, _, lo, hi) in rows(&doc) {
        let excludes_zero = lo > 0.0 || hi < 0.0;
        match name.as_str() {
            "covariate_shift" | "mediation_shift" => assert!(excludes_zero, "{name}: [{lo}, {hi}]"),
            "residual" => assert!(!excludes_zero, "{name}: [{lo}, {hi}]"),
            _ => {}
        }
    }
}

#[test]
fn example_two_matches_golden_document() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("doc.json");
    let o = decompose(
        &fixture("example2_original.csv"),
        &fixture("example2_replication.csv"),
        &["--out", out.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&out).unwrap(), fs::read(fixtures().join("example2_result.json")).unwrap());
}

#[test]
fn identical_inputs_give_zero_components() {
    let f = fixture("example1_replication.csv");
    let o = decompose(&f, &f, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    for (name, est, _, _) in rows(&doc) {
        assert!(est.abs() < 1e-9, "{name}: {est}");
    }
}

#[test]
fn runs_are_reproducible() {
    let a = decompose(&fixture("example2_original.csv"), &fixture("example2_replication.csv"), &["--seed", "7"]);
    let b = decompose(&fixture("example2_original.csv"), &fixture("example2_replication.csv"), &["--seed", "7"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let doc: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(doc["metadata"]["seed"], 7);
}

#[test]
fn absent_selection_event_exits_4() {
    // Outcome unrelated to treatment: the original estimate is insignificant.
    let dir = tempfile::tempdir().unwrap();
    let original = dir.path().join("null.csv");
    let text = edit_column(&fixture("example1_original.csv"), "y", |i, _| format!("{}", (i * 37 % 101) as f64 / 50.0));
    fs::write(&original, text).unwrap();
    let o =
        decompose(original.to_str().unwrap(), &fixture("example1_replication.csv"), &["--selection-alpha0", "0.05"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("selection event did not occur"), "{}", stderr(&o));
}

#[test]
fn infeasible_balancing_exits_3() {
    // Original ages far outside the replication support.
    let dir = tempfile::tempdir().unwrap();
    let original = dir.path().join("old.csv");
    let text =
        edit_column(&fixture("example1_original.csv"), "age", |_, v| format!("{}", v.parse::<f64>().unwrap() + 100.0));
    fs::write(&original, text).unwrap();
    let o = decompose(original.to_str().unwrap(), &fixture("example1_replication.csv"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("infeasible"), "{}", stderr(&o));
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(
        &bad,
        edit_column(&fixture("example1_original.csv"), "t", |i, v| if i == 3 { "2".into() } else { v.into() }),
    )
    .unwrap();
    let o = decompose(bad.to_str().unwrap(), &fixture("example1_replication.csv"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("treatment not coded 0/1"), "{}", stderr(&o));

    let o = decompose("/no/such/file.csv", &fixture("example1_replication.csv"), &[]);
    assert_eq!(o.status.code(), Some(2));

    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"outcome_columns": [], "treatment_column": "t"}"#).unwrap();
    let o = run(&[
        "decompose",
        "--original",
        &fixture("example1_original.csv"),
        "--replication",
        &fixture("example1_replication.csv"),
        "--spec",
        spec.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["simulate", "--setting", "s9x"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["simulate", "--setting", "s2ii", "--method", "selected_adjusted", "--reps", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o =
        bin().args(["simulate", "--setting", "s1i", "--reps", "1"]).env("SHIFTDIAG_THREADS", "lots").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn weights_export() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.csv");
    let o = decompose(
        &fixture("example1_original.csv"),
        &fixture("example1_replication.csv"),
        &["--weights-out", w.to_str().unwrap()],
    );
    assert!(o.status.success());
    let text = fs::read_to_string(&w).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "unit,covariate_weight,mediator_weight");
    assert_eq!(lines.len(), 501);
    let total: f64 = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

fn plot_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn plotdata_rows_round_trip() {
    let o = run(&["plotdata", "--in", &fixture("example1_result.json")]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("component,estimate,ci_lo,ci_hi,adjusted\n"));
    let doc: Value =
        serde_json::from_str(&fs::read_to_string(fixtures().join("example1_result.json")).unwrap()).unwrap();
    let plotted = plot_rows(&text);
    assert_eq!(plotted.len(), 4);
    for (row, (name, est, lo, hi)) in plotted.iter().zip(rows(&doc)) {
        assert_eq!(row[0], name);
        let nums: Vec<f64> = row[1..4].iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(nums, vec![est, lo, hi]);
        assert_eq!(row[4], "false");
    }
}

#[test]
fn plotdata_with_adjustment_has_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let doc = dir.path().join("adj.json");
    let o = decompose(
        &fixture("example1_original.csv"),
        &fixture("example1_replication.csv"),
        &["--selection-alpha0", "0.05", "--out", doc.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let plot = dir.path().join("plot.csv");
    let o = run(&["plotdata", "--in", doc.to_str().unwrap(), "--out", plot.to_str().unwrap()]);
    assert!(o.status.success());
    let plotted = plot_rows(&fs::read_to_string(&plot).unwrap());
    assert_eq!(plotted.len(), 8);
    assert_eq!(plotted.iter().filter(|r| r[4] == "true").count(), 4);
}

#[test]
fn plotdata_rejects_malformed_documents() {
    let dir = tempfile::tempdir().unwrap();
    let doc = dir.path().join("junk.json");
    fs::write(&doc, "{\"decomposition\": 3}").unwrap();
    let o = run(&["plotdata", "--in", doc.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_replicate_simulation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let args =
        ["simulate", "--setting", "s1i", "--sigma", "1", "--reps", "1", "--seed", "3", "--out", out.to_str().unwrap()];
    assert!(run(&args).status.success());
    let first = fs::read(&out).unwrap();
    let o = bin().args(args).env("SHIFTDIAG_THREADS", "1").output().unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read(&out).unwrap(), first);
    let report: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["requested"], 1);
    for c in report["components"].as_array().unwrap() {
        assert_eq!(c["replicates"], 1);
    }
}

#[test]
fn simulation_csv_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let o = run(&[
        "simulate",
        "--setting",
        "sel_ii",
        "--nu",
        "0.1",
        "--method",
        "selected_unadjusted,selected_adjusted",
        "--reps",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("setting,sigma,nu,method,component,coverage,sd,mean_n2\n"));
    assert!(text.contains("selected_unadjusted") && text.contains("selected_adjusted"));
}

#[test]
fn fixture_command_reproduces_checked_in_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["fixture", "--dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for entry in fs::read_dir(fixtures()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(dir.path().join(name)).unwrap(), "{name:?}");
    }
}
