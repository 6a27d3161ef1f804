//! End-to-end checks of the `dior` binary's command contracts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dior(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dior"))
        .args(args)
        .current_dir(dir)
        .env("DIOR_THREADS", "1")
        .output()
        .expect("spawn dior")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_fails(out: &Output, needle: &str) {
    assert!(!out.status.success(), "expected failure");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains(needle),
        "stderr missing `{needle}`: {stderr}"
    );
}

#[test]
fn synth_is_byte_identical_across_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "synth", "--classes", "4", "--per-class", "5", "--image-size", "16", "--seed", "7",
        "--out", "a.dold",
    ];
    assert_ok(&dior(&args, tmp.path()));
    let first = fs::read(tmp.path().join("a.dold")).unwrap();
    let args2 = [
        "synth", "--classes", "4", "--per-class", "5", "--image-size", "16", "--seed", "7",
        "--out", "b.dold",
    ];
    assert_ok(&dior(&args2, tmp.path()));
    let second = fs::read(tmp.path().join("b.dold")).unwrap();
    assert_eq!(first, second);
    assert!(tmp.path().join("a.dold.meta.txt").exists());
}

#[test]
fn synth_rejects_zero_per_class() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dior(
        &["synth", "--classes", "4", "--per-class", "0", "--out", "a.dold"],
        tmp.path(),
    );
    assert_fails(&out, "per_class");
    assert!(!tmp.path().join("a.dold").exists());
}

#[test]
fn train_logs_are_deterministic_and_eval_reads_them() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&dior(
        &[
            "synth", "--classes", "3", "--per-class", "4", "--image-size", "16", "--seed", "3",
            "--out", "d.dold",
        ],
        tmp.path(),
    ));
    let cfg = r#"{"num_blocks": 1, "token_dim": 16, "ff1": 32, "ff2": 32, "num_heads": 2}"#;
    fs::write(tmp.path().join("cfg.json"), cfg).unwrap();
    let train = |dir: &str| {
        assert_ok(&dior(
            &[
                "train", "--data", "d.dold", "--config", "cfg.json", "--epochs", "2",
                "--batch-size", "4", "--seed", "5", "--train-frac", "0.5", "--val-frac", "0.25",
                "--out-dir", dir,
            ],
            tmp.path(),
        ));
    };
    train("r1");
    train("r2");
    for f in ["train_log.csv", "model_best.ckpt", "model_final.ckpt"] {
        assert_eq!(
            fs::read(tmp.path().join("r1").join(f)).unwrap(),
            fs::read(tmp.path().join("r2").join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
    let log = fs::read_to_string(tmp.path().join("r1/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,lr,loss_cat,loss_diff,loss_total,val_acc,val_f1,val_kappa"));
    assert_eq!(log.lines().count(), 3); // header + 2 epochs

    let eval = dior(
        &[
            "eval", "--checkpoint", "r1/model_final.ckpt", "--data", "d.dold", "--pairs", "20",
            "--seed", "5", "--out", "report.csv",
        ],
        tmp.path(),
    );
    assert_ok(&eval);
    let report = fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    assert!(report.starts_with("acc,f1,kappa"));
    assert!(report.contains("pairs,20,"));
}

#[test]
fn eval_rejects_missing_checkpoint_and_mismatched_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&dior(
        &[
            "synth", "--classes", "2", "--per-class", "3", "--image-size", "16", "--seed", "1",
            "--out", "d.dold",
        ],
        tmp.path(),
    ));
    let out = dior(
        &["eval", "--checkpoint", "missing.ckpt", "--data", "d.dold"],
        tmp.path(),
    );
    assert!(!out.status.success());

    // checkpoint trained on 16x16/2-class data must refuse an 8x8 dataset
    let cfg = r#"{"num_blocks": 1, "token_dim": 16, "ff1": 32, "ff2": 32, "num_heads": 2}"#;
    fs::write(tmp.path().join("cfg.json"), cfg).unwrap();
    assert_ok(&dior(
        &[
            "train", "--data", "d.dold", "--config", "cfg.json", "--epochs", "1",
            "--batch-size", "3", "--seed", "1", "--train-frac", "0.5", "--val-frac", "0.25",
            "--out-dir", "run",
        ],
        tmp.path(),
    ));
    assert_ok(&dior(
        &[
            "synth", "--classes", "2", "--per-class", "3", "--image-size", "8", "--seed", "1",
            "--out", "small.dold",
        ],
        tmp.path(),
    ));
    let out = dior(
        &["eval", "--checkpoint", "run/model_final.ckpt", "--data", "small.dold"],
        tmp.path(),
    );
    assert_fails(&out, "image height");
}

#[test]
fn train_rejects_bad_config_before_writing_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&dior(
        &[
            "synth", "--classes", "2", "--per-class", "3", "--image-size", "16", "--seed", "1",
            "--out", "d.dold",
        ],
        tmp.path(),
    ));
    let out = dior(
        &[
            "train", "--data", "d.dold", "--diff-loss", "sigmoid", "--out-dir", "run",
        ],
        tmp.path(),
    );
    assert_fails(&out, "sigmoid");
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn config_file_precedence_and_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("cfg.json"), r#"{"classes": 3, "per_class": 2}"#).unwrap();
    // flag (classes 2) beats config file (classes 3); per_class comes from file
    let out = dior(
        &[
            "synth", "--config", "cfg.json", "--classes", "2", "--image-size", "8", "--out",
            "d.dold",
        ],
        tmp.path(),
    );
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("4 samples"), "{stdout}");
    assert!(stdout.contains("class 2: 2") && !stdout.contains("class 3"), "{stdout}");

    fs::write(tmp.path().join("bad.json"), r#"{"classez": 3}"#).unwrap();
    let out = dior(
        &["synth", "--config", "bad.json", "--out", "x.dold"],
        tmp.path(),
    );
    assert_fails(&out, "classez");
}

#[test]
fn losscurves_row_count_and_zero_row() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&dior(
        &["losscurves", "--span", "3", "--out", "curves.csv"],
        tmp.path(),
    ));
    let text = fs::read_to_string(tmp.path().join("curves.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "d,mse,mae,ce_o,nad");
    assert_eq!(lines.len() - 1, 1201);
    let zero_row = lines.iter().find(|l| l.starts_with("0.000000,")).unwrap();
    assert!(zero_row.ends_with(",0.000000"), "nad at d=0: {zero_row}");
}

#[test]
fn gradcheck_passes_by_default_and_fails_when_corrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dior(&["gradcheck", "--seed", "0"], tmp.path());
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    // every parameter group appears exactly once
    for group in ["patch_proj.w", "cls_token", "diff", "cat.fc1.w", "block0.ln1.gamma"] {
        assert_eq!(
            stdout.matches(&format!("{group}:")).count(),
            1,
            "{group} listed wrong number of times"
        );
    }
    let out = dior(&["gradcheck", "--seed", "0", "--corrupt-group", "3"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceed tolerance"));
}
