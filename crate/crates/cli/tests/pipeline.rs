use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bsp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsp")).args(args).env("RUST_LOG", "warn").output().expect("run bsp")
}

fn ok(args: &[&str]) {
    let o = bsp(args);
    assert!(o.status.success(), "bsp {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("bsp-test-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_one_manifest(dir: &Path) {
    let n = std::fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().file_name() == "manifest.json").count();
    assert_eq!(n, 1, "{}", dir.display());
}

const SHORT: [&str; 6] = ["--iters", "300", "--burn", "100", "--thin", "2"];

#[test]
fn simulate_fit_predict_diagnose_report() {
    let root = scratch("pipeline");
    let exp = root.join("exp");
    ok(&["simulate", "--replicates", "2", "--n-train", "60", "--n-test", "15", "--seed", "5", "--out", s(&exp)]);
    for r in ["rep_001", "rep_002"] {
        assert!(exp.join(r).join("train.csv").exists());
        assert!(exp.join(r).join("test.csv").exists());
        assert_one_manifest(&exp.join(r));
    }
    let truth = json(&exp.join("rep_002/truth.json"));
    assert_eq!(truth["seed"], 6);
    assert_eq!(truth["truth"]["train_u"].as_array().unwrap().len(), 60);

    let mut args = vec!["fit", "--experiment", s(&exp)];
    args.extend(SHORT);
    ok(&args);
    let fit = exp.join("rep_001/fit");
    for f in ["draws.csv", "fit.json", "summary.json", "summary.txt"] {
        assert!(fit.join(f).exists(), "{f}");
    }
    assert_one_manifest(&fit);
    assert_one_manifest(&fit.join("diagnostics"));
    let summary = json(&fit.join("summary.json"));
    assert_eq!(summary["draws"], 100);
    assert!(summary["eb"]["phi_hat"].as_f64().unwrap() > 0.0);
    let diag = json(&fit.join("diagnostics/diagnostics.json"));
    let auc = diag["test"]["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(diag["waic"]["waic"].as_f64().unwrap().is_finite());
    let pairs: u64 = diag["spatial_residuals"]["variogram"]["bins"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["count"].as_u64().unwrap())
        .sum::<u64>()
        + diag["spatial_residuals"]["variogram"]["overflow_count"].as_u64().unwrap();
    assert_eq!(pairs, 60 * 59 / 2);

    let sites = root.join("new.csv");
    std::fs::write(&sites, "x,y,x1\n0.5,0.5,1.0\n0.1,0.9,-0.5\n").unwrap();
    let pred = root.join("pred");
    ok(&["predict", "--fit", s(&fit), "--sites", s(&sites), "--out", s(&pred)]);
    let text = std::fs::read_to_string(pred.join("predictions.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for l in &lines[1..] {
        let v: Vec<f64> = l.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
        assert!(v[1] <= v[0] && v[0] <= v[2] && v[1] >= 0.0 && v[2] <= 1.0);
    }

    let report = root.join("report");
    ok(&["report", "--experiment", s(&exp), "--out", s(&report)]);
    let r = json(&report.join("report.json"));
    for row in r["conditional"].as_array().unwrap().iter().chain(r["marginal"].as_array().unwrap()) {
        assert!(row["covered"].as_u64().unwrap() <= 2);
        assert_eq!(row["n"], 2);
    }
    assert_eq!(r["test_auc"]["n"], 2);
    assert_one_manifest(&report);
    let _ = std::fs::remove_dir_all(root);
}

#[test]
fn fits_are_reproducible_and_low_rank_flag_sets_knots() {
    let root = scratch("repro");
    let exp = root.join("exp");
    ok(&["simulate", "--n-train", "50", "--n-test", "0", "--seed", "9", "--out", s(&exp)]);
    let data = exp.join("rep_001/train.csv");
    let digests = |dir: &Path| json(&dir.join("manifest.json"))["outputs"].clone();
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let out = root.join(name);
        let mut args = vec!["fit", "--data", s(&data), "--out", s(&out), "--seed", "3", "--knots-grid", "7x7"];
        args.extend(SHORT);
        ok(&args);
        outs.push(out);
    }
    assert_eq!(digests(&outs[0]), digests(&outs[1]));
    let meta = json(&outs[0].join("fit.json"));
    assert_eq!(meta["meta"]["knots"].as_array().unwrap().len(), 49);
    let _ = std::fs::remove_dir_all(root);
}

#[test]
fn empty_new_sites_give_header_only() {
    let root = scratch("empty");
    let exp = root.join("exp");
    ok(&["simulate", "--n-train", "40", "--n-test", "0", "--out", s(&exp)]);
    let fit = root.join("fit");
    let data = exp.join("rep_001/train.csv");
    let mut args = vec!["fit", "--data", s(&data), "--out", s(&fit)];
    args.extend(SHORT);
    ok(&args);
    let sites = root.join("none.csv");
    std::fs::write(&sites, "x,y,x1\n").unwrap();
    ok(&["predict", "--fit", s(&fit), "--sites", s(&sites), "--out", s(&root.join("pred"))]);
    let text = std::fs::read_to_string(root.join("pred/predictions.csv")).unwrap();
    assert_eq!(text.trim(), "site_x,site_y,p_mean,p_lo,p_hi");
    let _ = std::fs::remove_dir_all(root);
}

#[test]
fn large_square_design_layout() {
    let root = scratch("large");
    ok(&["simulate", "--large-square", "800", "--rho", "0.1", "--out", s(&root)]);
    let t = json(&root.join("rep_001/truth.json"));
    assert_eq!(t["design"]["n_train"], 800);
    assert_eq!(t["design"]["n_test"], 200);
    assert_eq!(t["design"]["domain_hi"]["x"], 2.0);
    let _ = std::fs::remove_dir_all(root);
}

#[test]
fn validation_failures_exit_with_code_two() {
    let root = scratch("codes");
    assert_eq!(bsp(&["fit", "--data", "/nonexistent.csv", "--out", s(&root)]).status.code(), Some(2));
    assert_eq!(bsp(&["fit", "--data", "x.csv", "--out", s(&root), "--mode", "zz"]).status.code(), Some(2));
    assert_eq!(bsp(&["fit", "--data", "x.csv", "--out", s(&root), "--iters", "10", "--burn", "20"]).status.code(), Some(2));
    assert_eq!(bsp(&["simulate", "--phi", "1.5", "--out", s(&root)]).status.code(), Some(2));
    let bad = root.join("bad.csv");
    std::fs::write(&bad, "x,y,response\n0.1,0.2,3\n").unwrap();
    let o = bsp(&["fit", "--data", s(&bad), "--out", s(&root.join("f"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 2"));
    assert_eq!(bsp(&["report", "--experiment", s(&root)]).status.code(), Some(2));
    let _ = std::fs::remove_dir_all(root);
}

#[test]
fn toml_config_is_applied() {
    let root = scratch("config");
    let exp = root.join("exp");
    ok(&["simulate", "--n-train", "40", "--n-test", "0", "--out", s(&exp)]);
    let cfg = root.join("run.toml");
    std::fs::write(
        &cfg,
        "[fit]\niterations = 250\nburn_in = 50\nthin = 4\nkernel = \"exponential\"\n\n[priors]\nrho = { lo = 0.01, hi = 0.5 }\n",
    )
    .unwrap();
    let fit = root.join("fit");
    ok(&["fit", "--data", s(&exp.join("rep_001/train.csv")), "--config", s(&cfg), "--out", s(&fit)]);
    let meta = json(&fit.join("fit.json"));
    assert_eq!(meta["config"]["kernel"], "exponential");
    assert_eq!(meta["priors"]["rho"]["hi"], 0.5);
    assert_eq!(json(&fit.join("summary.json"))["draws"], 50);
    let _ = std::fs::remove_dir_all(root);
}
