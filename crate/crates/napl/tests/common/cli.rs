//! Runs every subcommand of the binary on a tiny synthetic configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

pub const TINY_CONFIG: &str = r#"{
  "seed": 3,
  "train": {"batch_size": 2, "epochs": 2},
  "synthetic": {"train_scenes": 4, "val_scenes": 2}
}"#;

pub fn napl(dir: &Path, threads: usize, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_napl"))
        .args(args)
        .current_dir(dir)
        .env("NAPL_THREADS", threads.to_string())
        .env("RUST_LOG", "warn")
        .output()
        .expect("napl binary runs")
}

fn ok(dir: &Path, threads: usize, args: &[&str]) {
    let out = napl(dir, threads, args);
    assert!(out.status.success(), "napl {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Files whose content must depend only on config and seed.
pub const OUTPUTS: &[&str] = &[
    "data/manifest.json",
    "runs/pwc/log.jsonl",
    "runs/pwc/metrics.json",
    "runs/napl-full/log.jsonl",
    "runs/napl-full/metrics.json",
    "runs/eval-val/metrics.json",
    "runs/eval-val/frames.csv",
    "runs/stats-val/prototype_counts.csv",
    "runs/stats-val/prototype_counts.json",
];

/// gen-data, train-pwc, train-napl, eval and stats in `dir`; returns the
/// contents of [`OUTPUTS`].
pub fn pipeline(dir: &Path, threads: usize) -> Vec<(&'static str, Vec<u8>)> {
    fs::write(dir.join("tiny.json"), TINY_CONFIG).unwrap();
    let common = ["--config", "tiny.json", "--out-dir", "runs", "--data-root", "data"];
    let with = |cmd: &'static str, extra: &[&'static str]| -> Vec<&'static str> {
        let mut v = vec![cmd];
        v.extend(common);
        v.extend(extra);
        v
    };
    ok(dir, threads, &with("gen-data", &[]));
    ok(dir, threads, &with("train-pwc", &[]));
    ok(dir, threads, &with("train-napl", &["--ablation", "full"]));
    ok(dir, threads, &with("eval", &["--checkpoint", "runs/napl-full/best.ckpt"]));
    ok(dir, threads, &with("stats", &["--checkpoint", "runs/napl-full/best.ckpt"]));
    OUTPUTS
        .iter()
        .map(|f| (*f, fs::read(dir.join(f)).unwrap_or_else(|e| panic!("{f}: {e}"))))
        .collect()
}

/// Names of outputs that differ between two pipeline runs.
pub fn differences(a: &[(&'static str, Vec<u8>)], b: &[(&'static str, Vec<u8>)]) -> Vec<&'static str> {
    a.iter().zip(b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0).collect()
}
