use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ocds::pipeline::fixture::{planted_fixture, FixtureConfig};

fn ocds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ocds")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes the planted fixture and a pipeline config pointing at it.
fn setup(dir: &Path, extra: &str) -> String {
    let files = planted_fixture(&FixtureConfig::default()).unwrap().write(dir).unwrap();
    let mut cfg = files.pipeline_config(&dir.join("run"), 0);
    cfg.paths.corpus = "corpus.bin".into();
    cfg.paths.downstream = "downstream.bin".into();
    cfg.paths.out = "run".into();
    let path = dir.join("pipeline.toml");
    fs::write(&path, cfg.to_toml().unwrap() + extra).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn pipeline_runs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let out = dir.path().join("elsewhere");
    let o = ocds(&["pipeline", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("selected.bin").exists());
    assert!(!dir.path().join("run").exists());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("select") && stdout.contains("scores.tsv"));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 3);

    let again = ocds(&["pipeline", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert!(String::from_utf8(again.stdout).unwrap().contains("up to date"));
}

#[test]
fn solve_gamma_stops_after_solving() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let o = ocds(&["solve-gamma", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("run/gamma.tsv").exists());
    assert!(!dir.path().join("run/scorer.json").exists());
    for cmd in ["train-scorer", "score", "select"] {
        let o = ocds(&[cmd, "--config", &cfg]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    assert!(dir.path().join("run/selection.tsv").exists());
}

#[test]
fn config_errors_exit_2() {
    let o = ocds(&["pipeline"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--config"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "\n[bogus]\nx = 1\n");
    let o = ocds(&["pipeline", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = ocds(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_3_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("lr = 0.05", "lr = 50.0").replace("steps = 40\n", "steps = 100\n");
    fs::write(&cfg, text).unwrap();
    let o = ocds(&["pipeline", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("stage `pretrain-proxy`") || err.contains("stage `solve`"), "{err}");
}

#[test]
fn estimate_flops_prints_components() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("flops.toml");
    fs::write(&p, "n = 1.0\nd = 2.0\nn_prx = 3.0\nd_prx = 4.0\nn_score = 5.0\nm = 1.0\n").unwrap();
    let o = ocds(&["estimate-flops", "--config", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    // 6*3*2 + 24*3*4, 6*5*4 + 2*5*2, 0, 6*1*2
    assert_eq!(v["solver"], 324.0);
    assert_eq!(v["scorer"], 140.0);
    assert_eq!(v["selection"], 0.0);
    assert_eq!(v["pretraining"], 12.0);
    assert_eq!(v["total"], 476.0);
}

#[test]
fn fit_scaling_writes_document() {
    let dir = tempfile::tempdir().unwrap();
    let truth = ocds::scaling::ScalingFit::from_constants(500.0, 2e4, 2.0, 0.35, 0.4);
    let mut csv = String::from("N,D,L\n");
    for n in [1e7, 1e8, 1e9] {
        for d in [1e8, 1e9, 1e10, 1e11] {
            csv.push_str(&format!("{n},{d},{}\n", ocds::scaling::predict_loss(&truth, n, d)));
        }
    }
    let input = dir.path().join("points.csv");
    fs::write(&input, csv).unwrap();
    let out = dir.path().join("fit");
    let o = ocds(&["fit-scaling", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(out.join("scaling_fit.json")).unwrap()).unwrap();
    assert_eq!(doc["num_points"], 12);
    assert!((doc["fit"]["alpha"].as_f64().unwrap() - 0.35).abs() < 0.35 * 0.05);

    fs::write(&input, "N,D,L\n1,2\n").unwrap();
    assert_eq!(ocds(&["fit-scaling", "--input", input.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn simulate_writes_record() {
    let dir = tempfile::tempdir().unwrap();
    let o = ocds(&["simulate", "--seed", "1", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rec: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("simulation.json")).unwrap()).unwrap();
    assert!(rec["exact"]["auc"].as_f64().unwrap() < rec["baseline"]["auc"].as_f64().unwrap());
    let cfg = dir.path().join("sim.toml");
    fs::write(&cfg, "steps = 500\n").unwrap();
    let o = ocds(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
