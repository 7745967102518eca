use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_range-pebo"));
    cmd.env_remove("RANGE_PEBO_OUT");
    cmd
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn range-pebo")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).expect("read json")).expect("parse json")
}

/// Short noise-free copy of a bundled scenario written to `dir`.
fn short_scenario(dir: &Path, observer: &str, duration: f64) -> String {
    let trajectory = if observer == "pv_drem" { "ie_acceleration" } else { "pe" };
    let text = format!(
        r#"{{"name": "short", "trajectory": {{"kind": "{trajectory}"}}, "duration": {duration}, "dt": 0.001,
            "features": [[-2, 1, 3]], "observer": "{observer}", "noise": {{"accel": 0, "gyro": 0, "bearing": 0}}}}"#
    );
    let path = dir.join(format!("{observer}.json"));
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_bundled_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run(&["run", "pe_gradient", "--out-dir", out.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("t,z_x,z_y,z_z,"));
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["observer"], "gradient");
    let excitation = read_json(&out.join("excitation.json"));
    assert!(excitation["ie_level"].as_f64().unwrap() > 0.0);
}

#[test]
fn out_dir_defaults_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_scenario(tmp.path(), "pebo", 0.5);
    let out = tmp.path().join("from_env");
    let o = bin().args(["run", &cfg]).env("RANGE_PEBO_OUT", &out).current_dir(tmp.path()).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("trace.csv").exists());
    let entries: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries.len(), 2, "only the config and the env out-dir: {entries:?}");
}

#[test]
fn broken_config_lists_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(
        &path,
        r#"{"name": "bad", "trajectory": {"kind": "pe"}, "duration": -1, "dt": 0,
            "features": [[1, 2, 3]], "observer": "navigation", "gains": {"bogus": 1}}"#,
    )
    .unwrap();
    let o = run(&["run", path.to_str().unwrap(), "--out-dir", "o"], tmp.path());
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    for needle in ["duration", "dt", "landmark geometry", "bogus"] {
        assert!(err.contains(needle), "missing {needle}: {err}");
    }
    assert!(!tmp.path().join("o").exists(), "nothing written on validation failure");
}

#[test]
fn noise_free_flag_meets_thresholds() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["run", "ie_pebo", "--noise-free", "--out-dir", "o"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = read_json(&tmp.path().join("o/summary.json"));
    assert!(summary["final_error"]["z"].as_f64().unwrap() < 1e-3);
}

#[test]
fn collision_exits_with_abort_code() {
    let tmp = tempfile::tempdir().unwrap();
    // The PE trajectory passes through x(1) = [cos 0.5, sin(1)/4, -sqrt(3) sin(1)/4].
    let (a, b, c) = (0.5f64.cos(), 1f64.sin() / 4.0, -(3f64.sqrt()) * 1f64.sin() / 4.0);
    let text = format!(
        r#"{{"name": "crash", "trajectory": {{"kind": "pe"}}, "duration": 2, "dt": 0.001,
            "features": [[{a}, {b}, {c}]], "observer": "gradient"}}"#
    );
    let path = tmp.path().join("crash.json");
    fs::write(&path, text).unwrap();
    let o = run(&["run", path.to_str().unwrap(), "--out-dir", "o"], tmp.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("r_min"));
    let summary = read_json(&tmp.path().join("o/summary.json"));
    assert_eq!(summary["aborted"], true);
    assert!(tmp.path().join("o/trace.csv").exists(), "partial trace is kept");
}

#[test]
fn compare_shows_ie_dichotomy() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        &["compare", "ie_pebo", "--observers", "gradient,pebo", "--noise-free", "--out-dir", "o"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = read_json(&tmp.path().join("o/compare_summary.json"));
    let g = s["observers"]["gradient"]["final_error"]["z"].as_f64().unwrap();
    let p = s["observers"]["pebo"]["final_error"]["z"].as_f64().unwrap();
    assert!(p < g / 10.0, "pebo {p} vs gradient {g}");
    let header = fs::read_to_string(tmp.path().join("o/compare.csv")).unwrap();
    assert!(header.starts_with("t,gradient_err_z,gradient_err_r,pebo_err_z,pebo_err_r\n"));
}

#[test]
fn compare_shares_one_stream() {
    let tmp = tempfile::tempdir().unwrap();
    // Two copies of the same observer on one noisy stream must agree exactly.
    let o = run(&["compare", "pe_pebo", "--observers", "pebo,pebo", "--seed", "5", "--out-dir", "o"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("o/compare.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[1..3], f[3..5]);
    }
}

#[test]
fn compare_rejects_bad_observers() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["compare", "ie_pebo", "--observers", "gradient,kalman"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("kalman"));
    let o = run(&["compare", "pv_drem", "--observers", "gradient"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("acceleration mode"));
}

#[test]
fn sweep_grid_shape_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_scenario(tmp.path(), "gradient", 1.0);
    let args = ["sweep", cfg.as_str(), "--param", "gamma=10:100:4", "--seeds", "3"];
    let o = run(&[&args[..], &["--out-dir", "a", "--jobs", "2"]].concat(), tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = fs::read_to_string(tmp.path().join("a/sweep.csv")).unwrap();
    assert_eq!(a.lines().count(), 1 + 4 * 3);
    assert!(a.starts_with("gamma,seed,"));
    let o = run(&[&args[..], &["--out-dir", "b", "--jobs", "1"]].concat(), tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(a, fs::read_to_string(tmp.path().join("b/sweep.csv")).unwrap());
}

#[test]
fn sweep_rejects_bad_arguments() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_scenario(tmp.path(), "gradient", 0.2);
    for args in [
        vec!["sweep", &cfg, "--param", "gamma=10:100:4", "--seeds", "0"],
        vec!["sweep", &cfg, "--param", "rho=1:2:2"],
        vec!["sweep", &cfg, "--param", "gamma=10:100"],
    ] {
        let o = run(&args, tmp.path());
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn identical_seed_gives_identical_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = short_scenario(tmp.path(), "pv_drem", 1.0);
    for dir in ["a", "b"] {
        let o = run(&["run", &cfg, "--seed", "9", "--out-dir", dir], tmp.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = fs::read(tmp.path().join("a/trace.csv")).unwrap();
    let b = fs::read(tmp.path().join("b/trace.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn list_names_bundled_scenarios() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["list"], tmp.path());
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("nav") && out.contains("pe_gradient"));
}
