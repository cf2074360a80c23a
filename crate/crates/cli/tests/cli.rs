use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &[&str] = &["--set", "sim.n_sequences=2", "--set", "sim.steps=200", "--set", "fit.passes=2"];

fn vjf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vjf"))
        .args(args)
        .env_remove("VJF_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = vjf(args);
    assert!(
        out.status.success(),
        "vjf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_doc(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).expect("stderr is a JSON document")
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn dir_str(dir: &Path) -> &str {
    dir.to_str().unwrap()
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        run_ok(&[&["simulate", "--seed", "4", "--binary", "--out", dir_str(d)], SMALL].concat());
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
    let m = manifest(&a);
    assert_eq!(m["seeds"]["sim"], 4);
    assert_eq!(m["seeds"]["observation"], 5);
    assert_eq!(m["seeds"]["train"], 6);
    let listed = m["artifacts"].as_array().unwrap();
    assert_eq!(listed.len(), 4);
    assert!(listed.iter().all(|e| e["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn different_seeds_give_different_data() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&[&["simulate", "--seed", "1", "--out", dir_str(&a)], SMALL].concat());
    run_ok(&[&["simulate", "--seed", "2", "--out", dir_str(&b)], SMALL].concat());
    assert_ne!(
        fs::read(a.join("trajectory_000.csv")).unwrap(),
        fs::read(b.join("trajectory_000.csv")).unwrap()
    );
    assert_ne!(manifest(&a)["config_hash"], manifest(&b)["config_hash"]);
}

#[test]
fn zero_observation_dimension_names_the_key() {
    let tmp = TempDir::new().unwrap();
    let out = vjf(&["simulate", "--set", "observation.n=0", "--out", dir_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let doc = error_doc(&out);
    assert_eq!(doc["key"], "observation.n");
    assert_eq!(doc["kind"], "config");
    assert!(!tmp.path().join("manifest.json").exists());
}

#[test]
fn unknown_key_in_file_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[fit.train]\nlearning_rat = 0.01\n").unwrap();
    let out = vjf(&["filter", "--config", dir_str(&cfg), "--out", dir_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_doc(&out)["key"].as_str().unwrap().starts_with("fit.train"));
}

#[test]
fn missing_input_file_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let out = vjf(&["filter", "--input", "/nonexistent/data.csv", "--out", dir_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_doc(&out)["key"], "input.trajectories[0]");
}

#[test]
fn output_directory_from_environment() {
    let tmp = TempDir::new().unwrap();
    let target = tmp.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_vjf"))
        .args([&["simulate"], SMALL].concat())
        .env("VJF_OUTPUT_DIR", &target)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(target.join("trajectory_001.csv").exists());
}

#[test]
fn filter_on_simulated_and_loaded_data_agrees() {
    let tmp = TempDir::new().unwrap();
    let (sim, f1, f2) = (tmp.path().join("sim"), tmp.path().join("f1"), tmp.path().join("f2"));
    run_ok(&[&["simulate", "--binary", "--out", dir_str(&sim)], SMALL].concat());
    run_ok(&[&["filter", "--out", dir_str(&f1)], SMALL].concat());
    let csv = sim.join("trajectory_000.csv");
    let bin = sim.join("trajectory_001.bin");
    run_ok(&[&["filter", "--input", dir_str(&csv), "--input", dir_str(&bin), "--out", dir_str(&f2)], SMALL].concat());
    for name in ["checkpoint.json", "diagnostics.csv", "posterior_000.csv", "posterior_001.csv"] {
        assert_eq!(fs::read(f1.join(name)).unwrap(), fs::read(f2.join(name)).unwrap(), "{name}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(f1.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passes"], 2);
    assert!(summary["latent_rmse"].as_f64().unwrap().is_finite());
    let diag = fs::read_to_string(f1.join("diagnostics.csv")).unwrap();
    assert_eq!(diag.lines().count(), 1 + 2 * 200);
}

#[test]
fn filter_resumes_from_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&[&["filter", "--out", dir_str(&a)], SMALL].concat());
    let ck = a.join("checkpoint.json");
    run_ok(&[&["filter", "--checkpoint", dir_str(&ck), "--set", "fit.passes=1", "--out", dir_str(&b)], &SMALL[..4]].concat());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passes"], 3);
}

#[test]
fn predict_writes_rollouts_and_error_curves() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("p");
    run_ok(
        &[
            &["predict", "--set", "predict.horizon=20", "--set", "predict.trials=3", "--out", dir_str(&out)],
            SMALL,
        ]
        .concat(),
    );
    let rollout = fs::read_to_string(out.join("rollout_000.csv")).unwrap();
    assert_eq!(rollout.lines().next(), Some("trial,h,x_1,x_2"));
    assert_eq!(rollout.lines().count(), 1 + 3 * 20);
    let rmse = fs::read_to_string(out.join("rmse_mean.csv")).unwrap();
    assert_eq!(rmse.lines().count(), 21);

    let from_ck = tmp.path().join("pc");
    let ck = out.join("checkpoint.json");
    run_ok(&["predict", "--checkpoint", dir_str(&ck), "--set", "predict.horizon=5", "--set", "predict.trials=2", "--out", dir_str(&from_ck)]);
    assert_eq!(fs::read_to_string(from_ck.join("rollout_001.csv")).unwrap().lines().count(), 1 + 2 * 5);
}

#[test]
fn portrait_writes_grid_and_fixed_points() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("po");
    run_ok(&[&["portrait", "--set", "portrait.resolution=7", "--out", dir_str(&out)], SMALL].concat());
    let grid = fs::read_to_string(out.join("velocity_grid.csv")).unwrap();
    assert_eq!(grid.lines().next(), Some("x_1,x_2,v_1,v_2"));
    assert_eq!(grid.lines().count(), 1 + 49);
    let fps: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("fixed_points.json")).unwrap()).unwrap();
    assert!(fps.is_array());

    let bad = vjf(&[&["portrait", "--set", "portrait.bounds=[[-1.0,1.0]]", "--out", dir_str(&out)], SMALL].concat());
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(error_doc(&bad)["key"], "portrait.bounds");
}

#[test]
fn eval_requires_a_switching_system() {
    let tmp = TempDir::new().unwrap();
    let out = vjf(&["eval", "--preset", "ring", "--out", dir_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_doc(&out)["key"], "sim.system.kind");
}

#[test]
fn eval_compares_both_filters() {
    let tmp = TempDir::new().unwrap();
    let short = vjf(&["eval", "--set", "sim.steps=2400", "--out", dir_str(tmp.path())]);
    assert_eq!(short.status.code(), Some(2));
    assert_eq!(error_doc(&short)["key"], "sim.steps");
    run_ok(&["eval", "--set", "sim.steps=2600", "--set", "fit.passes=5", "--out", dir_str(tmp.path())]);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("eval.json")).unwrap()).unwrap();
    assert!(eval["post_recovery_ratio"].as_f64().unwrap() > 0.0);
    let errors = fs::read_to_string(tmp.path().join("errors.csv")).unwrap();
    assert_eq!(errors.lines().next(), Some("t,vjf,dekf"));
}

#[test]
fn bench_reports_timing() {
    let tmp = TempDir::new().unwrap();
    run_ok(&[
        "bench",
        "--set",
        "bench.warmup=20",
        "--set",
        "bench.steps=200",
        "--set",
        "bench.block=20",
        "--set",
        "bench.rounds=1",
        "--out",
        dir_str(tmp.path()),
    ]);
    let bench: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(bench["reference_ms_per_step"], 1.1);
    assert!(bench["median_ms"].as_f64().unwrap() > 0.0);
    assert_eq!(fs::read_to_string(tmp.path().join("bench_times.csv")).unwrap().lines().count(), 201);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let tmp = TempDir::new().unwrap();
    for (name, command) in [("ring.toml", "simulate"), ("switching.toml", "simulate")] {
        let cfg = root.join(name);
        let out = tmp.path().join(name);
        run_ok(&[
            command,
            "--config",
            dir_str(&cfg),
            "--set",
            "sim.steps=2600",
            "--set",
            "sim.n_sequences=1",
            "--out",
            dir_str(&out),
        ]);
        assert!(out.join("trajectory_000.csv").exists());
    }
}
