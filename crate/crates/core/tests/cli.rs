//! The `ergolil` binary end to end: exit codes, diagnostics and artifacts.

use std::path::Path;
use std::process::{Command, Output};

const OU: &str = "model.kind=ou\nmodel.a=1\nmodel.sigma=1\ngrid.kind=harmonic\ngrid.n_steps=1000\nmc.paths=1\nseed=42\n";

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.ini");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_ergolil"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .env_remove("ERGOLIL_WORKERS")
        .env_remove("ERGOLIL_OUT_DIR")
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_writes_schema() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &format!("{OU}output.state_checkpoints = 5\n"), &["simulate", "--out", "sim"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("sim/paths.csv")).unwrap();
    assert!(csv.starts_with("path_id,t,S,lil_stat,run_max,run_min\n"));
    let states = std::fs::read_to_string(dir.path().join("sim/states.csv")).unwrap();
    assert!(states.starts_with("path_id,n,t,y0\n"));
    assert_eq!(states.lines().last().unwrap().split(',').nth(1), Some("1000"));
    let resolved = std::fs::read_to_string(dir.path().join("sim/config.resolved.ini")).unwrap();
    assert!(resolved.contains("newton_tol = 0.000000000001"));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.ini");
    std::fs::write(&cfg, OU).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ergolil"))
        .args(["lil-curve", "--config"])
        .arg(&cfg)
        .env("ERGOLIL_OUT_DIR", dir.path().join("env_out"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("env_out/paths.csv").exists());
}

#[test]
fn estimate_v_reports_exact_and_batch_means() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), OU, &["estimate-v", "--out", "ev"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = json(&dir.path().join("ev/summary.json"));
    let methods: Vec<&str> = doc["estimates"].as_array().unwrap().iter().map(|e| e["method"].as_str().unwrap()).collect();
    assert!(methods.contains(&"exact_linear") && methods.contains(&"batch_means"), "{methods:?}");
    let exact = doc["estimates"].as_array().unwrap().iter().find(|e| e["method"] == "exact_linear").unwrap();
    assert_eq!(exact["v2"].to_string().parse::<f64>().unwrap(), 1.0);
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), OU, &["verify", "--out", "v"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("(ii)") && table.contains("pass"));
    let doc = json(&dir.path().join("v/summary.json"));
    assert_eq!(doc["all_pass"], true);
    // Constant steps violate condition (i).
    let constant = OU.replace("grid.kind=harmonic", "grid.kind=constant\ngrid.scale=0.01");
    let o = run(dir.path(), &constant, &["verify", "--out", "v2"]);
    assert_eq!(o.status.code(), Some(1));
    let doc = json(&dir.path().join("v2/summary.json"));
    assert_eq!(doc["all_pass"], false);
}

#[test]
fn decompose_rows_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), OU, &["decompose", "--out", "d"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("d/decompose.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("k,t_k,R,Mtilde,Rtilde,Z,reconstruction_residual"));
    for line in lines {
        let residual: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(residual < 1e-10, "{line}");
    }
    let doc = json(&dir.path().join("d/summary.json"));
    assert_eq!(doc["v_hat_source"], "exact");
    assert_eq!(doc["strassen"].as_array().unwrap().len(), 5);
}

#[test]
fn validation_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &format!("{OU}grid.thetta = 0.5\n"), &["simulate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 8") && stderr(&o).contains("grid.theta"), "{}", stderr(&o));

    let o = run(dir.path(), &format!("{OU}grid.theta = 1.5\n"), &["simulate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("(0, 1]"));

    let o = run(dir.path(), &format!("{OU}stats.k_max = 40\n"), &["simulate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("horizon"));

    let o = run(dir.path(), "seed = 1\n", &["verify"]);
    assert_eq!(o.status.code(), Some(1));
    for key in ["model.kind", "grid.kind", "grid.n_steps"] {
        assert!(stderr(&o).contains(key), "{}", stderr(&o));
    }

    let o = run(dir.path(), OU, &["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn nested_budget_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "seed=1\nmodel.kind=sode\nf.kind=tanh\ngrid.kind=harmonic\ngrid.n_steps=100000\nmartingale.eval_up_to=5000\n";
    let o = run(dir.path(), cfg, &["decompose", "--out", "d"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("step_budget"), "{}", stderr(&o));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("blocker"), "a file, not a directory").unwrap();
    let o = run(dir.path(), OU, &["simulate", "--out", "blocker"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn outputs_do_not_depend_on_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = OU.replace("mc.paths=1", "mc.paths=7");
    for w in ["1", "4"] {
        let o = run(dir.path(), &cfg, &["lil-curve", "--workers", w, "--out", &format!("w{w}")]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["paths.csv", "summary.json", "config.resolved.ini"] {
        let a = std::fs::read(dir.path().join("w1").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("w4").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), OU, &["lil-curve", "--out", "a"]);
    run(dir.path(), OU, &["lil-curve", "--seed", "43", "--out", "b"]);
    let a = std::fs::read_to_string(dir.path().join("a/paths.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b/paths.csv")).unwrap();
    assert_ne!(a, b);
    assert!(std::fs::read_to_string(dir.path().join("b/config.resolved.ini")).unwrap().starts_with("seed = 43\n"));
}
