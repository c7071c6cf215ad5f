#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

pub const TINY: &str = r#"
preset = "compact"
seed = 3

[model.vlm]
layers = 1
width = 16
heads = 2

[model.deep]
layers = 1
width = 16
heads = 2

[model.shallow]
width = 8
heads = 2

[data]
train_scenes = 48
heldout_scenes = 6
codec_scenes = 200
seed = 11

[stage0]
steps = 4
batch = 4

[stage1]
steps = 3
batch = 4

[stage2]
steps = 3
batch = 4

[stage3]
steps = 3
batch = 4
"#;

pub fn pretzel(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pretzel"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str], cwd: &Path) -> String {
    let out = pretzel(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// The single stderr line of a failing invocation.
pub fn fails(args: &[&str], cwd: &Path) -> String {
    let out = pretzel(args, cwd);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "error spans several lines: {err}");
    err.trim_end().to_string()
}

pub fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// CSV text with the named column removed.
pub fn without_column(text: &str, column: &str) -> String {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let drop = header.iter().position(|h| *h == column);
    std::iter::once(header.join(","))
        .chain(lines.map(String::from))
        .map(|l| {
            l.split(',')
                .enumerate()
                .filter(|(i, _)| Some(*i) != drop)
                .map(|(_, v)| v)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn run_pipeline(dir: &Path) {
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
    ok(&["pretrain-stub", "--config", "tiny.toml", "--out", "s0"], dir);
    ok(&["train", "--stage", "1", "--from", "s0", "--out", "s1"], dir);
    ok(&["train", "--stage", "2", "--from", "s1", "--out", "s2"], dir);
    ok(&["train", "--stage", "3", "--from", "s0", "--flow", "s1", "--adapter", "s2", "--out", "s3"], dir);
    ok(&["sample", "--ckpt", "s3", "--prompt", "a red square at center", "--seed", "5", "--out", "img.png"], dir);
    ok(&["eval", "--ckpt", "s3", "--suite", "both", "--n", "4", "--out", "eval.csv", "--per-prompt", "pp.csv"], dir);
    ok(&["bench", "--ckpt", "s3", "--turns", "3", "--images", "2", "--out", "bench.csv"], dir);
    ok(&["analyze", "--ckpt", "s3", "--prompts", "3", "--seed", "2", "--out", "skip"], dir);
}

/// Files written by [`run_pipeline`] that must match byte for byte.
pub const EXACT_OUTPUTS: [&str; 11] = [
    "s0/manifest.json",
    "s0/params.bin",
    "s1/params.bin",
    "s2/params.bin",
    "s3/manifest.json",
    "s3/params.bin",
    "img.png",
    "eval.csv",
    "pp.csv",
    "skip/skip_vis.csv",
    "skip/skip_txt.csv",
];

/// CSV outputs that carry a `wall_ms` column.
pub const TIMED_OUTPUTS: [&str; 3] = ["s0/metrics_stage0.csv", "s3/metrics_stage3.csv", "bench.csv"];

/// Names of outputs that differ between two pipeline runs.
pub fn differing_outputs(a: &Path, b: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for f in EXACT_OUTPUTS {
        if read(&a.join(f)) != read(&b.join(f)) {
            out.push(f.to_string());
        }
    }
    for f in TIMED_OUTPUTS {
        let x = String::from_utf8(read(&a.join(f))).unwrap();
        let y = String::from_utf8(read(&b.join(f))).unwrap();
        if without_column(&x, "wall_ms") != without_column(&y, "wall_ms") {
            out.push(f.to_string());
        }
    }
    out
}
