use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;
use tempfile::TempDir;

const SMALL_FLAT: &str = r#"
[data]
n_train_ic = 400
[evaluation]
n_test_trajectories = 10
test_horizon = 20
[control]
horizon = 10
n_control_ic = 3
[analysis]
radii = 16
angles = 32
"#;

fn kmgame(dir: &Path, config: Option<&str>, args: &[&str]) -> (bool, Value) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kmgame"));
    cmd.args(args).arg("--out").arg(dir.join("out"));
    if let Some(text) = config {
        let path = dir.join("config.toml");
        fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(path);
    }
    let out = cmd.output().unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    let value = serde_json::from_str(&stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {stdout}"));
    (out.status.success(), value)
}

fn error_kind(v: &Value) -> &str {
    v["error"]["kind"].as_str().unwrap()
}

#[test]
fn simulate_one_ic_writes_steps_plus_one_rows() {
    let dir = TempDir::new().unwrap();
    let (ok, v) = kmgame(dir.path(), Some("[simulate]\nn_ic = 1\nsteps = 100\n"), &["simulate"]);
    assert!(ok, "{v}");
    assert_eq!(v["n_ic"], 1);
    let csv = fs::read_to_string(dir.path().join("out/simulate/trajectory_0000.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 101);
    assert!(lines[0].starts_with("t,x1_1,x1_2,x2_1,x2_2,u1,u2"));
}

#[test]
fn simulate_zero_ics_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let (ok, v) = kmgame(dir.path(), Some("[simulate]\nn_ic = 0\n"), &["simulate"]);
    assert!(!ok);
    assert_eq!(error_kind(&v), "config");
    assert!(v["error"]["message"].as_str().unwrap().contains("n_ic"));
}

#[test]
fn simulate_is_reproducible_under_a_fixed_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let cfg = "variant = \"hier\"\n[simulate]\nn_ic = 2\nsteps = 5\ncontrols = \"random\"\n";
    for d in [&a, &b] {
        let (ok, v) = kmgame(d.path(), Some(cfg), &["simulate", "--seed", "9"]);
        assert!(ok, "{v}");
    }
    for f in ["trajectory_0000.csv", "trajectory_0001.csv"] {
        let x = fs::read(a.path().join("out/simulate").join(f)).unwrap();
        let y = fs::read(b.path().join("out/simulate").join(f)).unwrap();
        assert_eq!(x, y);
    }
}

#[test]
fn divergence_is_reported_per_ic() {
    let dir = TempDir::new().unwrap();
    let cfg = "[simulate]\nsteps = 200\ninitial = [[0.1, 0.0, 0.2, 0.0], [8.0, 8.0, 8.0, 8.0]]\n";
    let (ok, v) = kmgame(dir.path(), Some(cfg), &["simulate"]);
    assert!(ok, "{v}");
    let recs = v["records"].as_array().unwrap();
    assert!(recs[0]["error"].is_null());
    assert!(recs[1]["error"].as_str().unwrap().contains("diverged"), "{v}");
    assert_eq!(v["diverged"], 1);
}

#[test]
fn fit_twice_gives_identical_model_hash() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let (ok, va) = kmgame(a.path(), Some(SMALL_FLAT), &["fit", "--seed", "5"]);
    assert!(ok, "{va}");
    let (_, vb) = kmgame(b.path(), Some(SMALL_FLAT), &["fit", "--seed", "5"]);
    assert_eq!(va["model_hash"], vb["model_hash"]);
    assert_eq!(va["rms"]["per_agent"].as_array().unwrap().len(), 2);
    assert_eq!(
        fs::read(a.path().join("out/model.bundle")).unwrap(),
        fs::read(b.path().join("out/model.bundle")).unwrap()
    );
    let (_, vc) = kmgame(b.path(), Some(SMALL_FLAT), &["fit", "--seed", "6"]);
    assert_ne!(va["model_hash"], vc["model_hash"]);
}

#[test]
fn flat_pipeline_end_to_end() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let (ok, v) = kmgame(d, Some(SMALL_FLAT), &["fit"]);
    assert!(ok, "{v}");
    assert!(v["reduced_hash"].is_null());

    let (ok, v) = kmgame(d, Some(SMALL_FLAT), &["analyze"]);
    assert!(ok, "{v}");
    let table = fs::read_to_string(d.join("out/metrics.txt")).unwrap();
    for row in ["||X^c_i||", "||X^c_ij||", "P_max,i", "log||A||_2", "T_bound"] {
        assert!(table.contains(row), "{table}");
    }
    assert!(table.contains("K_comb"));

    let (ok, v) = kmgame(d, Some(SMALL_FLAT), &["control"]);
    assert!(ok, "{v}");
    assert_eq!(v["n_ic"], 3);
    assert_eq!(v["mean_rms_control_optimum"].as_array().unwrap().len(), 2);
    assert_eq!(v["coupling_identity"], true);
    let csv = fs::read_to_string(d.join("out/control.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    let json: Value = serde_json::from_str(&fs::read_to_string(d.join("out/control.json")).unwrap()).unwrap();
    assert_eq!(json["records"].as_array().unwrap().len(), 3);
    assert!(d.join("out/control/ic0000_equilibrium.csv").exists());

    let (ok, v) = kmgame(d, Some(SMALL_FLAT), &["report"]);
    assert!(ok, "{v}");
    let report = fs::read_to_string(d.join("out/report.txt")).unwrap();
    assert!(report.contains("reference"));
    assert!(report.contains("held-out RMS"));
    assert!(!report.to_lowercase().contains("paper"));
}

#[test]
fn hier_pipeline_reports_reduced_model() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = format!("variant = \"hier\"\n{SMALL_FLAT}").replace("n_train_ic = 400", "n_train_ic = 700");
    let (ok, v) = kmgame(d, Some(&cfg), &["fit"]);
    assert!(ok, "{v}");
    assert!(v["reduced_hash"].is_string());
    assert!(v["consistency"]["max_step_deviation"].as_f64().unwrap() <= 1e-10);
    assert!(d.join("out/reduced.bundle").exists());

    let (ok, v) = kmgame(d, Some(&cfg), &["analyze"]);
    assert!(ok, "{v}");
    let labels: Vec<&str> = v["columns"].as_array().unwrap().iter().map(|c| c["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["K_xx,11", "K_xx,22", "K_comb", "B_xx,1", "B_xx,2", "B_xx,comb"]);
    let table = fs::read_to_string(d.join("out/metrics.txt")).unwrap();
    assert!(table.contains("--"));
    // the slow scale of the full model has no control input
    assert!(v["columns"][0]["gramian_control_norm"].is_null());
}

#[test]
fn hundred_control_ics_give_hundred_rows() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = format!("{SMALL_FLAT}\n").replace("horizon = 10\nn_control_ic = 3", "horizon = 4\nn_control_ic = 100\nwrite_trajectories = false");
    let (ok, v) = kmgame(d, Some(&cfg), &["fit"]);
    assert!(ok, "{v}");
    let (ok, v) = kmgame(d, Some(&cfg), &["control"]);
    assert!(ok, "{v}");
    assert_eq!(v["n_ic"], 100);
    let csv = fs::read_to_string(d.join("out/control.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 100);
}

#[test]
fn decoupled_model_has_matching_optimum_and_equilibrium() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = format!("{SMALL_FLAT}\n").replace("[control]\n", "[control]\ndecoupled = true\n");
    let (ok, v) = kmgame(d, Some(&cfg), &["fit"]);
    assert!(ok, "{v}");
    let (ok, v) = kmgame(d, Some(&cfg), &["control"]);
    assert!(ok, "{v}");
    assert!(v["max_abs_total_difference"].as_f64().unwrap() <= 1e-7, "{v}");
    for x in v["mean_control_difference"].as_array().unwrap() {
        assert!(x.as_f64().unwrap() <= 1e-7, "{v}");
    }
}

#[test]
fn missing_model_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let (ok, v) = kmgame(dir.path(), None, &["analyze"]);
    assert!(!ok);
    assert_eq!(error_kind(&v), "io");
    let (ok, v) = kmgame(dir.path(), None, &["report"]);
    assert!(!ok);
    assert_eq!(error_kind(&v), "missing_data");
}

#[test]
fn bad_arguments_produce_error_json() {
    let dir = TempDir::new().unwrap();
    let (ok, v) = kmgame(dir.path(), None, &["simulate", "--profile", "lab"]);
    assert!(!ok);
    assert_eq!(error_kind(&v), "usage");
    let (ok, v) = kmgame(dir.path(), Some("[control]\nhorizn = 3\n"), &["simulate"]);
    assert!(!ok);
    assert_eq!(error_kind(&v), "config");
    let (ok, v) = kmgame(dir.path(), Some("[[["), &["simulate"]);
    assert!(!ok);
    assert_eq!(error_kind(&v), "config");
}
