use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name).display().to_string()
}

fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stochint")).args(args).output().expect("binary runs")
}

fn stdout_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Compares against the stored golden file; `UPDATE_GOLDEN=1` rewrites it.
fn check_golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden {}", path.display()));
    assert!(expected == actual, "output differs from golden {name}");
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap()
}

fn fit_args() -> Vec<String> {
    ["fit", "--design", &fixture("design.json"), "--data", &fixture("data.csv")]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn fit_matches_golden_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = fit_args();
    args.extend(["--out-dir".into(), dir.path().display().to_string()]);
    let out = stdout_ok(&strs(&args));
    check_golden("fit.json", &out);
    assert_eq!(std::fs::read_to_string(dir.path().join("model.json")).unwrap(), out);
    let manifest = json(&std::fs::read_to_string(dir.path().join("model.manifest.json")).unwrap());
    assert_eq!(manifest["command"], "fit");
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 2);
    assert!(manifest["timestamp_unix"].as_u64().is_some());
}

#[test]
fn group_and_stage_filters() {
    let mut args = fit_args();
    args.extend(["--group".into(), "R".into(), "--stage".into(), "general".into(), "--coding".into(), "baseline".into()]);
    let m = json(&stdout_ok(&strs(&args)));
    assert_eq!(m["tag"]["group"], "R");
    assert_eq!(m["tag"]["stage"], "general");
    assert_eq!(m["coding"], "baseline");
}

#[test]
fn closed_hand_example() {
    let out = stdout_ok(&["optimize", "--method", "closed", "--lambda", "1", "--model", &fixture("hand_model.json")]);
    check_golden("optimize_closed.json", &out);
    let v = json(&out);
    let pi = &v["solutions"][0]["pi"];
    for d in 0..2 {
        assert!((pi[d][0].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-10);
    }
    assert_eq!(v["solutions"][0]["valid"], true);
}

#[test]
fn ascent_golden_with_csv_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixture("hand_model.json");
    let d = dir.path().display().to_string();
    let args = ["optimize", "--method", "ascent", "--model", &model, "--lambda-grid", "0.5,1,2", "--out-dir", &d];
    let out = stdout_ok(&args);
    check_golden("optimize_ascent.json", &out);
    let v = json(&out);
    assert!(v["estimate"].get("trace").is_none());
    let grid = std::fs::read_to_string(dir.path().join("lambda_grid.csv")).unwrap();
    assert_eq!(grid.lines().next(), Some("lambda,q,se,score"));
    assert_eq!(grid.lines().count(), 4);
    let traced = json(&stdout_ok(&["optimize", "--method", "ascent", "--model", &model, "--lambda", "1", "--trace"]));
    let trace = traced["estimate"]["trace"].as_array().unwrap();
    assert!(trace.len() > 1);
    assert!(trace.windows(2).all(|w| w[1].as_f64().unwrap() >= w[0].as_f64().unwrap()));
}

#[test]
fn adversarial_golden() {
    let out = stdout_ok(&[
        "adversarial",
        "--institution",
        &fixture("institution.json"),
        "--lambda",
        "0.013958",
        "--deviation-resolution",
        "0.01",
        "--grid-resolution",
        "0.01",
        "--inference",
    ]);
    check_golden("adversarial.json", &out);
    let v = json(&out);
    assert_eq!(v["equilibrium"]["converged"], true);
    assert_eq!(v["equilibrium"]["deviation"]["certified"], true);
    assert!(v["grid_max_abs_diff"].as_f64().unwrap() < 0.02);
}

#[test]
fn diverge_golden_and_identity() {
    let (a, b) = (fixture("strategy_a.json"), fixture("strategy_b.json"));
    let out = stdout_ok(&["diverge", "--strategy-a", &a, "--strategy-b", &b]);
    check_golden("diverge.json", &out);
    assert_eq!(json(&out)["rows"].as_array().unwrap().len(), 12);
    let same = json(&stdout_ok(&["diverge", "--strategy-a", &a, "--strategy-b", &a, "--profile", "gender=male,age=old,experience=none"]));
    assert_eq!(same["rows"][0]["divergence"].as_f64(), Some(0.0));
}

#[test]
fn bound_golden() {
    let out = stdout_ok(&[
        "bound",
        "--design",
        &fixture("design.json"),
        "--data",
        &fixture("data.csv"),
        "--strategy",
        &fixture("strategy_a.json"),
    ]);
    check_golden("bound.json", &out);
    let v = json(&out);
    for key in ["bound", "max_prob", "l2_term", "shift_applied"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert!(v["l2_term"].as_f64() >= v["maxprob_term"].as_f64());
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a/table.csv"), dir.path().join("b/table.csv"));
    for p in [&p1, &p2] {
        stdout_ok(&["simulate", "--study", "average", "--reps", "10", "--seed", "7", "--n", "300", "--out", p.to_str().unwrap()]);
    }
    let (a, b) = (std::fs::read_to_string(&p1).unwrap(), std::fs::read_to_string(&p2).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.lines().next(), Some("study,n,d_or_pr,target,bias,rmse,coverage,mc_se,failures"));
    assert!(dir.path().join("a/table.manifest.json").exists());
    assert!(dir.path().join("a/table.json").exists());
}

#[test]
fn threads_do_not_change_results() {
    let model = fixture("hand_model.json");
    let args = |t: &'static str| {
        vec!["--threads", t, "optimize", "--method", "ascent", "--model", &model, "--lambda-grid", "0.5,1"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>()
    };
    assert_eq!(stdout_ok(&strs(&args("1"))), stdout_ok(&strs(&args("3"))));
}

#[test]
fn config_file_supplies_flags_and_command_line_wins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"method": "closed", "lambda": 1}"#).unwrap();
    let model = fixture("hand_model.json");
    let c = cfg.to_str().unwrap();
    let from_cfg = json(&stdout_ok(&["--config", c, "optimize", "--model", &model]));
    assert_eq!(from_cfg["method"], "closed");
    let overridden = json(&stdout_ok(&["--config", c, "optimize", "--model", &model, "--lambda", "2"]));
    assert_eq!(overridden["solutions"][0]["lambda"].as_f64(), Some(2.0));
}

#[test]
fn exit_codes() {
    let missing = run(&["fit", "--design", "/nonexistent/design.json", "--data", &fixture("data.csv")]);
    assert_eq!(missing.status.code(), Some(2));
    let singular = run(&["fit", "--design", &fixture("design.json"), "--data", &fixture("rank_deficient.csv")]);
    assert_eq!(singular.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&singular.stderr).contains("aliased"));
    let maxprob_closed = run(&["optimize", "--method", "closed", "--penalty", "maxprob", "--lambda", "1", "--model", &fixture("hand_model.json")]);
    assert_eq!(maxprob_closed.status.code(), Some(2));
    let bad_flag = run(&["optimize", "--no-such-flag"]);
    assert_eq!(bad_flag.status.code(), Some(2));
    let stalled = run(&["optimize", "--method", "ascent", "--lambda", "1", "--max-steps", "1", "--no-polish", "--model", &fixture("hand_model.json")]);
    assert_eq!(stalled.status.code(), Some(4), "{}", String::from_utf8_lossy(&stalled.stderr));
    assert!(!stalled.stdout.is_empty());
}
