use std::path::Path;
use std::process::{Command, Output};

use scanfeat_cli::error::{EXIT_CONFIG, EXIT_IO};

fn scanfeat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scanfeat"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

const SMALL: &[&str] = &["--seed", "3", "--set", "simulate.trajectory.steps=5"];

fn simulate(dir: &Path) {
    let out = scanfeat(dir, &[SMALL, &["simulate", "--out", "sim"]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn identity_manifest_benchmarks_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let manifest: String = (0..5).map(|k| format!("{k} {k} 1 0 0 0 0 1 0 0 0 0 1 0\n")).collect();
    std::fs::write(dir.path().join("identity.txt"), manifest).unwrap();
    let out = scanfeat(dir.path(), &["bench", "--manifest", "identity.txt", "--scans", "sim", "--out", "bench"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("RS 100.00% MR 100.00% RR 100.00%"), "{stdout}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("bench/report.json")).unwrap()).unwrap();
    assert_eq!(report["rr"], 100.0);
    assert!(dir.path().join("bench/timing.json").exists());
}

#[test]
fn slam_writes_both_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    for (out, extra) in [("odo", None), ("lc", Some("--loop-closure"))] {
        let mut args = vec!["slam", "--scans", "sim", "--out", out, "--emit-plots"];
        args.extend(extra);
        let res = scanfeat(dir.path(), &args);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        let tum = std::fs::read_to_string(dir.path().join(out).join("trajectory.tum")).unwrap();
        assert_eq!(tum.lines().count(), 20);
        for f in ["slam.json", "config.json", "trajectory.csv", "trajectory.gp"] {
            assert!(dir.path().join(out).join(f).exists(), "{out}/{f}");
        }
    }
    let config: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("lc/config.json")).unwrap()).unwrap();
    assert_eq!(config["slam"]["loop_closure"], true);
}

#[test]
fn malformed_config_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{ \"seed\": ").unwrap();
    std::fs::write(dir.path().join("typo.json"), "{ \"simulate\": { \"scaner\": \"os1-64\" } }").unwrap();
    for cfg in ["bad.json", "typo.json"] {
        let out = scanfeat(dir.path(), &["--config", cfg, "simulate", "--out", "sim"]);
        assert_eq!(out.status.code(), Some(EXIT_CONFIG));
        let err: serde_json::Value = serde_json::from_slice(out.stderr.rsplit(|b| *b == b'\n').find(|l| !l.is_empty()).unwrap()).unwrap();
        assert_eq!(err["error"], "config");
        assert!(!dir.path().join("sim").exists());
    }
    let out = scanfeat(dir.path(), &["--set", "bench.tau1=-1", "simulate", "--out", "sim"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(!dir.path().join("sim").exists());
}

#[test]
fn missing_inputs_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = scanfeat(dir.path(), &["extract", "--scan", "nope.scan", "--out", "f.feat"]);
    assert_eq!(out.status.code(), Some(EXIT_IO));
    assert!(!dir.path().join("f.feat").exists());
}

#[test]
fn extract_emits_score_raster() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let out = scanfeat(dir.path(), &["extract", "--scan", "sim/scans/000002.scan", "--out", "f.feat", "--emit-plots"]);
    assert!(out.status.success());
    let pgm = std::fs::read(dir.path().join("f.score.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n1024 64\n"));
    let csv = std::fs::read_to_string(dir.path().join("f.keypoints.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}
