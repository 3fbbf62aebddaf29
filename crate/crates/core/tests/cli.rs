//! End-to-end CLI tests against the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn svwa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svwa"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn pipeline_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();

    let out = svwa(
        dir,
        &[
            "gen-data", "--out", "data.pcd", "--train-per-class", "4", "--test-per-class", "3",
            "--n-points", "64", "--seed", "5",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("data.pcd").exists());

    let out = svwa(
        dir,
        &[
            "pretrain", "--dataset", "data.pcd", "--out", "model.ckpt", "--epochs", "1",
            "--batch-size", "8", "--mlp", "8,16", "--head", "8", "--fps-points", "16",
            "--seed", "5",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("model.ckpt").exists());
    assert!(dir.join("model.log").exists());

    let out = svwa(
        dir,
        &[
            "adapt", "--checkpoint", "model.ckpt", "--dataset", "data.pcd", "--out", "res",
            "--method", "svwa", "--corruption", "gaussian:2", "--nv", "2", "--batch-size", "8",
            "--repeats", "2", "--seed", "9",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("res/rows.csv").exists());
    assert!(dir.join("res/summary.csv").exists());
    assert!(dir.join("res/config.resolved").exists());

    let out = svwa(dir, &["report", "--rows", "res/rows.csv", "--out", "rep"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("rep/summary.csv").exists());

    // config error: malformed corruption spec
    let out = svwa(
        dir,
        &[
            "adapt", "--checkpoint", "model.ckpt", "--dataset", "data.pcd", "--out", "bad",
            "--corruption", "gaussian:9",
        ],
    );
    assert_eq!(out.status.code(), Some(2));

    // I/O error: missing checkpoint
    let out = svwa(
        dir,
        &[
            "adapt", "--checkpoint", "missing.ckpt", "--dataset", "data.pcd", "--out", "bad",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    svwa(
        dir,
        &[
            "gen-data", "--out", "data.pcd", "--train-per-class", "4", "--test-per-class", "3",
            "--n-points", "64", "--seed", "5",
        ],
    );
    svwa(
        dir,
        &[
            "pretrain", "--dataset", "data.pcd", "--out", "model.ckpt", "--epochs", "0",
            "--batch-size", "8", "--mlp", "8", "--head", "8", "--fps-points", "16", "--seed", "5",
        ],
    );
    std::fs::write(
        dir.join("run.conf"),
        "method = tent\ncorruption = uniform:1\nbatch_size = 8\nrepeats = 1\nnv = 3\n",
    )
    .unwrap();
    let out = svwa(
        dir,
        &[
            "adapt", "--checkpoint", "model.ckpt", "--dataset", "data.pcd", "--out", "res",
            "--config", "run.conf", "--method", "source-only",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = std::fs::read_to_string(dir.join("res/config.resolved")).unwrap();
    // flag wins over file for method; file values survive elsewhere
    assert!(resolved.contains("method = source-only"));
    assert!(resolved.contains("corruption = uniform:1"));
    assert!(resolved.contains("nv = 3"));

    // unknown config key is a config error
    std::fs::write(dir.join("bad.conf"), "methd = tent\n").unwrap();
    let out = svwa(
        dir,
        &[
            "adapt", "--checkpoint", "model.ckpt", "--dataset", "data.pcd", "--out", "res2",
            "--config", "bad.conf",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_assert_ordering_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    svwa(
        dir,
        &[
            "gen-data", "--out", "data.pcd", "--train-per-class", "4", "--test-per-class", "3",
            "--n-points", "64", "--seed", "5",
        ],
    );
    // untrained model: adaptation cannot beat chance-level source by any
    // margin consistently, but the exit code contract is what matters here —
    // a strict ordering over one tiny stream with epochs=0 is essentially
    // coin-flip, so only assert that the code is 0 or 4, never something else
    svwa(
        dir,
        &[
            "pretrain", "--dataset", "data.pcd", "--out", "model.ckpt", "--epochs", "0",
            "--batch-size", "8", "--mlp", "8", "--head", "8", "--fps-points", "16", "--seed", "5",
        ],
    );
    let out = svwa(
        dir,
        &[
            "sweep", "--checkpoint", "model.ckpt", "--dataset", "data.pcd", "--out", "sw",
            "--methods", "source-only,tent,svwa", "--corruptions", "gaussian:1",
            "--nv", "2", "--batch-size", "8", "--repeats", "1", "--seed", "3",
            "--assert-ordering",
        ],
    );
    let code = out.status.code();
    assert!(code == Some(0) || code == Some(4), "unexpected exit {code:?}");
    assert!(dir.join("sw/rows.csv").exists());
    assert!(dir.join("sw/config.resolved").exists());
}
