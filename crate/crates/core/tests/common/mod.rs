#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn olhtr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_olhtr"))
        .args(args)
        .output()
        .expect("olhtr runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes `n` synthetic sequences to `path` through the binary.
pub fn synth(path: &Path, n: usize, seed: u64) {
    let o = olhtr(&[
        "synth",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        p(path),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

/// A few quick optimizer steps on a narrow model.
pub fn quick_train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        p(data),
        "--out",
        p(out),
        "--width",
        "16",
        "--max-steps",
        "3",
        "--batch-size",
        "4",
        "--val-fraction",
        "0",
    ];
    args.extend_from_slice(extra);
    olhtr(&args)
}
