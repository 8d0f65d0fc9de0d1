use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use spatial_multinomial::io::read_chain;
use spatial_multinomial::selection::{ternary_search, DimSearchTrace};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spmn"));
    c.env_remove("SPMN_THREADS");
    c
}

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy/run.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn spmn")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "spmn {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fit_toy(dir: &Path, extra: &[&str]) -> PathBuf {
    let cfg = toy_config();
    let out = dir.to_str().unwrap();
    let mut args = vec!["fit", "--config", cfg.to_str().unwrap(), "--n-samples", "10", "--n-burnin", "5", "--out", out];
    args.extend_from_slice(extra);
    ok(&args);
    dir.join("chain.spmn")
}

#[test]
fn fit_smoke_on_toy_data() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let path = fit_toy(dir.path(), &[]);
    assert!(t.elapsed().as_secs_f64() < 5.0);
    let chain = read_chain(&path).unwrap();
    assert_eq!(chain.n_draws(), 10);
    assert_eq!(chain.n_classes(), 3);
}

#[test]
fn fit_reports_acceptance_and_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let stdout = ok(&["fit", "--config", cfg.to_str().unwrap(), "--n-samples", "10", "--n-burnin", "0", "--out", dir.path().to_str().unwrap()]);
    assert!(stdout.contains("s per cycle"), "{stdout}");
    for block in ["w1", "mu", "omega", "phi"] {
        assert!(stdout.lines().any(|l| l.trim_start().starts_with(block)), "{stdout}");
    }
}

#[test]
fn fixed_seed_fits_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    fit_toy(a.path(), &["--csv", "--seed", "11"]);
    fit_toy(b.path(), &["--csv", "--seed", "11"]);
    let da = fs::read(a.path().join("chain_draws.csv")).unwrap();
    let db = fs::read(b.path().join("chain_draws.csv")).unwrap();
    assert_eq!(da, db);
}

#[test]
fn predict_on_a_single_point() {
    let dir = tempfile::tempdir().unwrap();
    let chain = fit_toy(dir.path(), &[]);
    let locs = dir.path().join("one.csv");
    fs::write(&locs, "x,y\n0.4,0.6\n").unwrap();
    let out = dir.path().join("pred");
    ok(&[
        "predict",
        "--chain",
        chain.to_str().unwrap(),
        "--locations",
        locs.to_str().unwrap(),
        "--quantiles",
        "0.5",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(out.join("locations.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let header: Vec<&str> = lines[0].split(',').collect();
    let row: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    let means: Vec<f64> = header
        .iter()
        .zip(&row)
        .filter(|(h, _)| h.starts_with("mean_"))
        .map(|(_, v)| *v)
        .collect();
    assert_eq!(means.len(), 3);
    assert!((means.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn predict_writes_area_table() {
    let dir = tempfile::tempdir().unwrap();
    let chain = fit_toy(dir.path(), &[]);
    let out = dir.path().join("pred");
    ok(&[
        "predict",
        "--chain",
        chain.to_str().unwrap(),
        "--grid",
        "4,4",
        "--bounds",
        "0,1,0,1",
        "--area-size",
        "0.5,0.5",
        "--area-class",
        "class1",
        "--out",
        out.to_str().unwrap(),
    ]);
    let areas = fs::read_to_string(out.join("areas.csv")).unwrap();
    assert_eq!(areas.lines().count(), 5);
    assert!(areas.starts_with("area,occurrence_class1"));
}

#[test]
fn stubbed_dimension_search_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let scores = [9.0, 7.0, 4.0, 3.0, 3.5, 5.0, 8.0, 9.5, 12.0];
    let list: Vec<String> = scores.iter().map(|s| s.to_string()).collect();
    ok(&[
        "select-dim",
        "--stub-waic",
        &list.join(","),
        "--u-min",
        "1",
        "--u-max",
        "9",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let trace: DimSearchTrace =
        serde_json::from_str(&fs::read_to_string(dir.path().join("dim_trace.json")).unwrap()).unwrap();
    let expected = ternary_search(1, 9, |u| Ok(scores[u - 1])).unwrap();
    assert_eq!(trace.selected_u, 4);
    assert_eq!(trace.selected_u, expected.selected_u);
    let us: Vec<usize> = trace.evaluated.iter().map(|e| e.u).collect();
    let expected_us: Vec<usize> = expected.evaluated.iter().map(|e| e.u).collect();
    assert_eq!(us, expected_us);
    assert!(us.len() < scores.len());
}

#[test]
fn summarize_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    ok(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--n-samples",
        "20",
        "--n-burnin",
        "5",
        "--chains",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let c1 = dir.path().join("chain_1.spmn");
    let c2 = dir.path().join("chain_2.spmn");
    let table = dir.path().join("summary.csv");
    let s = ok(&["summarize", "--chain", c1.to_str().unwrap(), "--out", table.to_str().unwrap()]);
    assert!(s.contains("phi"));
    let csv = fs::read_to_string(&table).unwrap();
    assert!(csv.starts_with("name,mean,sd,q05,q50,q95,ess"));
    let d = ok(&["diagnostics", "--chain", c1.to_str().unwrap(), "--chain", c2.to_str().unwrap()]);
    assert!(d.contains("R-hat"), "{d}");
    let single = ok(&["diagnostics", "--chain", c1.to_str().unwrap()]);
    assert!(single.contains("needs at least two chains"));
}

#[test]
fn resume_continues_from_last_state() {
    let dir = tempfile::tempdir().unwrap();
    let first = fit_toy(dir.path(), &[]);
    let next = dir.path().join("next");
    let cfg = toy_config();
    ok(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--resume",
        first.to_str().unwrap(),
        "--n-samples",
        "7",
        "--out",
        next.to_str().unwrap(),
    ]);
    let c = read_chain(&next.join("chain.spmn")).unwrap();
    assert_eq!(c.n_draws(), 7);
    assert_eq!(c.config.n_burnin, 0);
}

#[test]
fn validation_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"sampler": {"thin": 0, "phi_rw_sd": -1.0}, "n_chains": 0}"#).unwrap();
    let out = run(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("3 configuration problem(s)"), "{err}");

    fs::write(&cfg, r#"{"sampler": {"n_sample": 10}}"#).unwrap();
    let out = run(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));

    let out = run(&["fit", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));

    let out = bin().env("SPMN_THREADS", "zero").args(["summarize", "--chain", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupt_artifact_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.spmn");
    fs::write(&p, b"not a chain").unwrap();
    let out = run(&["summarize", "--chain", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_writes_a_runnable_config() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim.json");
    fs::write(&sim, r#"{"n_classes": 3, "u_true": 1, "grid_side": 6, "n_train": 20, "knot_side": 3}"#).unwrap();
    let out = dir.path().join("s");
    ok(&["simulate", "--config", sim.to_str().unwrap(), "--seed", "3", "--out", out.to_str().unwrap()]);
    for f in ["train.csv", "test.csv", "knots.csv", "truth.json", "grid_truth.csv", "run.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let run_cfg = out.join("run.json");
    ok(&["fit", "--config", run_cfg.to_str().unwrap(), "--n-samples", "5", "--n-burnin", "0"]);
    assert!(out.join("fit/chain.spmn").exists());
}

#[test]
fn study_commands_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim.json");
    fs::write(&sim, r#"{"n_classes": 3, "u_true": 1, "grid_side": 6, "n_train": 20, "knot_side": 3}"#).unwrap();
    let sim = sim.to_str().unwrap();
    let out = dir.path().join("lap");
    let s = ok(&[
        "study", "laplace", "--omega", "0.5,2", "--sim-config", sim, "--n-samples", "20", "--n-burnin", "10", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(s.contains("w accept"), "{s}");
    assert!(out.join("laplace_summary.json").exists());
    let logits = fs::read_to_string(out.join("laplace_logits.csv")).unwrap();
    assert!(logits.starts_with("omega,exact,nested"));

    let out = dir.path().join("dim");
    let s = ok(&[
        "study", "dimension", "--replicates", "2", "--sim-config", sim, "--n-samples", "10", "--n-burnin", "5", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(s.contains("over 2 replicates"), "{s}");
    let reps = fs::read_to_string(out.join("dimension_replicates.csv")).unwrap();
    assert_eq!(reps.lines().count(), 3);
}
