#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn gramood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gramood"))
        .args(args)
        .output()
        .expect("spawn gramood")
}

/// Runs and panics with stderr on a non-zero exit.
pub fn ok(args: &[&str]) -> Output {
    let out = gramood(args);
    assert!(
        out.status.success(),
        "gramood {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub struct Files {
    pub train: std::path::PathBuf,
    pub id_test: std::path::PathBuf,
    pub ood: std::path::PathBuf,
}

pub fn gen(dir: &Path, extra: &[&str]) -> Files {
    let mut args = vec!["gen", "--out-dir", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
    Files {
        train: dir.join("train.gact"),
        id_test: dir.join("id_test.gact"),
        ood: dir.join("ood_test.gact"),
    }
}

pub fn small_gen(dir: &Path, kind: &str) -> Files {
    gen(
        dir,
        &[
            "--classes",
            "4",
            "--layers",
            "4x6,6x4,3x5,5x3",
            "--per-class",
            "30",
            "--ood-kind",
            kind,
            "--seed",
            "1",
        ],
    )
}
