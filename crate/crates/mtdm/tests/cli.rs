//! Black-box tests of the mtdm binary: happy paths and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn mtdm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtdm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn mtdm")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn preprocess_train_eval_explain_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    mtdm_gen_dataset(&data);

    let out = mtdm(
        &["preprocess", "--data", "data", "--out", "facts.bin"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("source sha256"));
    assert!(dir.path().join("facts.bin").exists());

    let out = mtdm(
        &[
            "train",
            "--cache",
            "facts.bin",
            "--checkpoint",
            "m.ckpt",
            "--log",
            "train.jsonl",
            "--set",
            "dim=8",
            "--set",
            "epochs=2",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("dim=8"));
    assert!(text.contains("checkpoint written"));
    assert!(dir.path().join("m.ckpt").exists());
    let log = std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss_total"].as_f64().unwrap().is_finite());
    }

    let out = mtdm(
        &["eval", "--cache", "facts.bin", "--checkpoint", "m.ckpt"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(metrics["mrr"].as_f64().unwrap() >= 0.0);
    assert!(metrics["queries"].as_u64().unwrap() > 0);

    let out = mtdm(
        &[
            "explain",
            "--cache",
            "facts.bin",
            "--checkpoint",
            "m.ckpt",
            "--subject",
            "0",
            "--relation",
            "0",
            "--time",
            "27",
            "--top",
            "3",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 3);
}

#[test]
fn train_on_synthetic_without_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtdm(
        &[
            "train",
            "--synthetic",
            "--checkpoint",
            "m.ckpt",
            "--set",
            "dim=8",
            "--set",
            "epochs=1",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("m.ckpt").exists());
}

#[test]
fn dry_run_prints_resolved_config_with_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtdm(
        &[
            "train",
            "--synthetic",
            "--checkpoint",
            "m.ckpt",
            "--dry-run",
            "--no-tln",
            "--no-dm",
            "--recurrent-mode",
            "--dissolution",
            "--set",
            "window=7",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("no_tln=true"));
    assert!(text.contains("no_dm=true"));
    assert!(text.contains("no_tren=false"));
    assert!(text.contains("mode=recurrent"));
    assert!(text.contains("lambda4=0.01"));
    assert!(text.contains("window=7"));
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn every_ablation_flag_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    for flag in [
        "--no-tln",
        "--no-tren",
        "--no-dm",
        "--no-reset-gate",
        "--recurrent-mode",
        "--dissolution",
    ] {
        let out = mtdm(
            &[
                "train",
                "--synthetic",
                "--checkpoint",
                "m.ckpt",
                "--dry-run",
                flag,
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{flag}: {}", stderr(&out));
    }
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtdm(&["train", "--checkpoint", "m.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("no dataset"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtdm(
        &[
            "train",
            "--synthetic",
            "--checkpoint",
            "m.ckpt",
            "--set",
            "learning=fast",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn unparsable_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    std::fs::write(data.join("stat.txt"), "4 2\n").unwrap();
    std::fs::write(data.join("train.txt"), "0\tnot-a-number\t1\t0\n").unwrap();
    std::fs::write(data.join("valid.txt"), "").unwrap();
    std::fs::write(data.join("test.txt"), "").unwrap();
    let out = mtdm(
        &["preprocess", "--data", "data", "--out", "facts.bin"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn missing_data_dir_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtdm(
        &["preprocess", "--data", "nowhere", "--out", "facts.bin"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn config_file_env_and_set_stack_in_order() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "dim = 16\nwindow = 4\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mtdm"))
        .args([
            "train",
            "--synthetic",
            "--checkpoint",
            "m.ckpt",
            "--dry-run",
            "--config",
            "run.cfg",
            "--set",
            "window=6",
        ])
        .env("MTDM_DIM", "32")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    // env beats the file, --set beats both
    assert!(text.contains("dim=32"));
    assert!(text.contains("window=6"));
}

fn mtdm_gen_dataset(dir: &Path) {
    mtdm::synthetic::write_dataset(dir).unwrap();
}
