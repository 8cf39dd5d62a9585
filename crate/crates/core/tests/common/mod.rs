//! Helpers shared by the CLI and acceptance tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY_SPEC: &str = "\
feature_dim = 6
embed_dim = 4
min_length = 60
max_length = 90
source = source:8
targets = target_a:5,target_b:5,target_c:6
";

pub const TINY_RUN: &str = "\
arch = tsan
hidden = 3
epochs = 2
permutations = 4
";

pub const TINY_HARNESS: &str = "\
hidden = 2
epochs = 1
seso_epochs = 2
permutations = 4
seeds = 0
rows = lstm_l1:random:baseline,tsan:seso:transfer
sweep_archs = tsan
sizes = 1,2,all
";

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsan-lab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn cli_ok(args: &[&str]) {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Runs every CLI command once inside `dir` and returns the CSV (and other
/// data) files produced, relative to `dir`.
pub fn run_all_commands(dir: &Path) -> Vec<PathBuf> {
    fs::create_dir_all(dir).unwrap();
    for (name, text) in [
        ("spec.txt", TINY_SPEC),
        ("run.txt", TINY_RUN),
        ("harness.txt", TINY_HARNESS),
    ] {
        fs::write(dir.join(name), text).unwrap();
    }
    let j = |s: &str| dir.join(s);
    cli_ok(&["gen-data", "--spec", p(&j("spec.txt")), "--out", p(&j("bench"))]);
    cli_ok(&[
        "pretrain-seso",
        "--data",
        p(&j("bench")),
        "--config",
        p(&j("run.txt")),
        "--out",
        p(&j("seso.ck")),
    ]);
    cli_ok(&[
        "train",
        "--data",
        p(&j("bench")),
        "--arch",
        "tsan",
        "--init",
        p(&j("seso.ck")),
        "--config",
        p(&j("run.txt")),
        "--out",
        p(&j("step.ck")),
    ]);
    cli_ok(&[
        "train",
        "--data",
        p(&j("bench")),
        "--init",
        "random",
        "--config",
        p(&j("run.txt")),
        "--out",
        p(&j("random.ck")),
    ]);
    cli_ok(&[
        "eval",
        "--ckpt",
        p(&j("step.ck")),
        "--data",
        p(&j("bench")),
        "--report",
        p(&j("eval.csv")),
        "--domain",
        "target_b",
    ]);
    for cmd in ["table2", "sweep", "table3"] {
        cli_ok(&[
            cmd,
            "--benchmark",
            p(&j("bench")),
            "--config",
            p(&j("harness.txt")),
            "--out",
            p(&j(cmd)),
        ]);
    }
    cli_ok(&[
        "rerun",
        "--manifest",
        p(&j("table2/run_manifest.txt")),
        "--out",
        p(&j("rerun")),
    ]);
    let mut files = Vec::new();
    collect(dir, dir, &mut files);
    files.sort();
    files
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect(root, &path, out);
        } else if matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("csv" | "tsv" | "sfm" | "ck")
        ) {
            out.push(path.strip_prefix(root).unwrap().to_path_buf());
        }
    }
}

/// Files whose bytes differ between two runs.
pub fn differing(a: &Path, b: &Path, files: &[PathBuf]) -> Vec<PathBuf> {
    files
        .iter()
        .filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok())
        .cloned()
        .collect()
}
