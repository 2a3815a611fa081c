use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use crate::{check, Outcome};

const TIMING: &str = "timing.json";

/// Every seeded subcommand, in pipeline order, with paths relative to the run root.
const STEPS: &[&[&str]] = &[
    &["simulate", "--out", "sim"],
    &["pairgen", "--scans", "sim", "--out", "pairs"],
    &["train", "--pairs", "pairs", "--out", "train"],
    &["extract", "--scan", "sim/scans/000000.scan", "--weights", "train/weights.w3dl", "--out", "net0.feat"],
    &["extract", "--scan", "sim/scans/000000.scan", "--out", "f0.feat"],
    &["extract", "--scan", "sim/scans/000001.scan", "--out", "f1.feat"],
    &["register", "--a", "f1.feat", "--b", "f0.feat", "--out", "reg.txt"],
    &["slam", "--scans", "sim", "--out", "slam_odo"],
    &["slam", "--scans", "sim", "--out", "slam_lc", "--loop-closure"],
    &["bench", "--manifest", "pairs/manifest.txt", "--scans", "sim", "--out", "bench"],
];

const COMMON: &[&str] = &[
    "--seed",
    "7",
    "--set",
    "simulate.trajectory.steps=5",
    "--set",
    "train.max_steps=3",
    "--set",
    "pairgen.anchor_stride=4",
    "--emit-plots",
];

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != TIMING) {
            out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path)?);
        }
    }
    Ok(())
}

/// Runs the whole pipeline in `root` and returns every artifact.
fn run_pipeline(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let _ = std::fs::remove_dir_all(root);
    std::fs::create_dir_all(root).map_err(|e| e.to_string())?;
    for step in STEPS {
        let status = Command::new(env!("CARGO_BIN_EXE_scanfeat"))
            .args(COMMON)
            .args(*step)
            .current_dir(root)
            .env("RUST_LOG", "error")
            .stdout(Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("`{}` exited with {status}", step.join(" ")));
        }
    }
    let mut files = BTreeMap::new();
    collect(root, root, &mut files).map_err(|e| e.to_string())?;
    Ok(files)
}

/// Two runs in the same directory must leave byte-identical artifacts.
pub fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("run");
    let first = run_pipeline(&root)?;
    let second = run_pipeline(&root)?;
    let differing: Vec<String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let bytes: usize = first.values().map(Vec::len).sum();
    check(
        differing.is_empty() && !first.is_empty(),
        format!(
            "{} subcommand runs, {} artifacts ({:.1} MB) compared{}",
            STEPS.len(),
            first.len(),
            bytes as f64 / 1e6,
            if differing.is_empty() { String::new() } else { format!("; differing: {}", differing.join(", ")) }
        ),
    )
}
