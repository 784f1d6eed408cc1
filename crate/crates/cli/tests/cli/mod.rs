use std::path::Path;
use std::process::{Command, Output};

use gsnet::data::{synthesize_poses, write_json_atomic};
use gsnet::filter::direct_solve;
use gsnet::graph::{human36m_topology, laplacian, normalize_adjacency, H36mVariant};
use gsnet::linalg::{from_rows, to_rows};
use gsnet::Mat;
use serde_json::Value;

fn gsnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsnet"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run gsnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_exits_2() {
    let _guard = super::serial();
    let dir = tempfile::tempdir().unwrap();
    let o = gsnet(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_flag_exits_2() {
    let _guard = super::serial();
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gsnet(dir.path(), &["spectrum", "--gamma", "1"]).status.code(), Some(2));
}

#[test]
fn train_help_lists_ablation_flags() {
    let _guard = super::serial();
    let dir = tempfile::tempdir().unwrap();
    let o = gsnet(dir.path(), &["train", "--help"]);
    assert!(o.status.success());
    let help = stdout(&o);
    for flag in [
        "--channels",
        "--blocks",
        "--alpha",
        "--beta",
        "--dropout",
        "--lr",
        "--batch-size",
        "--epochs",
        "--seed",
        "--block-style",
        "--no-nonlocal",
        "--no-refine",
        "--no-skip",
        "--no-adj-modulation",
        "--no-weight-modulation",
        "--out",
        "--data",
        "--checkpoint",
    ] {
        assert!(help.contains(flag), "missing {flag}");
    }
}

#[test]
fn gradcheck_reports_every_group() {
    let _guard = super::serial();
    let dir = tempfile::tempdir().unwrap();
    let o = gsnet(dir.path(), &["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for group in ["W ", "W_skip", "M ", "Q ", "norm", "nonlocal", "refine"] {
        assert!(out.contains(group), "missing {group}: {out}");
    }
}

#[test]
fn gradcheck_fails_above_tolerance() {
    let _guard = super::serial();
    let dir = tempfile::tempdir().unwrap();
    let o = gsnet(dir.path(), &["gradcheck", "--tol", "1e-14"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn filter_matches_direct_solve() {
    let _guard = super::serial();
    let dir = tempfile::tempdir().unwrap();
    let x = Mat::from_fn(16, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
    write_json_atomic(&dir.path().join("x.json"), &to_rows(&x)).unwrap();
    for method in ["exact", "direct"] {
        let o = gsnet(
            dir.path(),
            &["filter", "--features", "x.json", "--joints", "16", "--beta", "0.3", "--method", method],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
        let rows: Vec<Vec<f64>> = serde_json::from_value(v["solution"].clone()).unwrap();
        let na = normalize_adjacency(&human36m_topology(H36mVariant::Joints16).adjacency());
        let expected = direct_solve(&x, &laplacian(&na), 0.3).unwrap();
        assert!((from_rows(&rows).unwrap() - expected).norm() < 1e-8);
        assert_eq!(v["report"]["converged"], Value::Bool(true));
    }
}

#[test]
fn filter_rejects_mismatched_features() {
    let _guard = super::serial();
    let dir = tempfile::tempdir().unwrap();
    write_json_atomic(&dir.path().join("x.json"), &vec![vec![1.0]; 5]).unwrap();
    let o = gsnet(dir.path(), &["filter", "--features", "x.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error"));
}

#[test]
fn spectrum_prints_ranges() {
    let _guard = super::serial();
    let dir = tempfile::tempdir().unwrap();
    let o = gsnet(dir.path(), &["spectrum", "--beta", "0.25"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("bound [1, 1.5]"), "{out}");
    assert!(out.contains("0.250000000000"), "{out}");
}

#[test]
fn eval_of_exact_predictions_scores_zero() {
    let _guard = super::serial();
    let dir = tempfile::tempdir().unwrap();
    let ds = synthesize_poses(&human36m_topology(H36mVariant::Joints17), 10, 3).unwrap();
    ds.save(&dir.path().join("ds.json")).unwrap();
    let pred: Vec<Vec<[f64; 3]>> = ds.records.iter().map(|r| r.pose3d.clone()).collect();
    write_json_atomic(&dir.path().join("pred.json"), &pred).unwrap();
    let o = gsnet(dir.path(), &["eval", "--data", "ds.json", "--pred", "pred.json", "--out", "r.json", "--table"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r["mpjpe"].as_f64(), Some(0.0));
    assert_eq!(r["pck"].as_f64(), Some(100.0));
    assert!(r["pa_mpjpe"].as_f64().unwrap() < 1e-8);
    assert!(r["per_action"].as_object().unwrap().len() > 1);
    assert!(stdout(&o).contains("PA-MPJPE"));
}

#[test]
fn eval_needs_a_prediction_source() {
    let _guard = super::serial();
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gsnet(dir.path(), &["eval", "--data", "ds.json"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_clean_error() {
    let _guard = super::serial();
    let dir = tempfile::tempdir().unwrap();
    let o = gsnet(dir.path(), &["train", "--data", "nope.json", "--out", "c.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.json"));
    assert!(!dir.path().join("c.json").exists());
}

#[test]
fn synth_train_eval_and_resume() {
    let _guard = super::serial();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(gsnet(d, &["synth", "--n", "64", "--seed", "7", "--joints", "16", "--out", "ds.json"]).status.success());
    let common = [
        "--data", "ds.json", "--channels", "8", "--blocks", "1", "--refine-hidden", "16", "--batch-size", "16",
        "--seed", "7",
    ];
    let run = |out: &str, epochs: &str, extra: &[&str]| {
        let mut args = vec!["train", "--out", out, "--epochs", epochs];
        args.extend(common);
        args.extend(extra);
        let o = gsnet(d, &args);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    run("full.json", "4", &[]);
    run("half.json", "2", &[]);
    run("resumed.json", "4", &["--checkpoint", "half.json"]);
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("full.json"), read("resumed.json"));

    let o = gsnet(d, &["eval", "--data", "ds.json", "--checkpoint", "full.json", "--write-pred", "p.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let o2 = gsnet(d, &["eval", "--data", "ds.json", "--pred", "p.json"]);
    let report2: Value = serde_json::from_str(&stdout(&o2)).unwrap();
    assert_eq!(report, report2);
    for key in ["mpjpe", "pa_mpjpe", "pck", "auc", "per_action"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
}
