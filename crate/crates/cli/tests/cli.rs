//! Smoke tests for the `hsic` binary: the happy path through the
//! pretrain/finetune/report/export pipeline and the documented exit codes.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_hsic");

fn hsic(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("HSIC_DATA_DIR")
        .output()
        .expect("failed to spawn hsic")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Three vertical class strips with class-specific band peaks, enough for a
/// tiny but learnable scene.
fn write_scene(dir: &Path) {
    let (h, w, b) = (18usize, 18usize, 6usize);
    let mut refl = vec![0.0f32; h * w * b];
    let mut gt = vec![0i32; h * w];
    let mut rng = hsic_core::rng::Rng::new(0xc11);
    for r in 0..h {
        for c in 0..w {
            let class = (c * 3 / w) as i32 + 1;
            gt[r * w + c] = class;
            for band in 0..b {
                let peak = if band / 2 == (class - 1) as usize { 0.8 } else { 0.1 };
                refl[(r * w + c) * b + band] = peak + rng.uniform(-0.03, 0.03);
            }
        }
    }
    hsic_core::npy::write_f32(&dir.join("data.npy"), &[h, w, b], &refl).unwrap();
    hsic_core::npy::write_i32(&dir.join("gt.npy"), &[h, w], &gt).unwrap();
}

fn write_config(dir: &Path) {
    let toml = format!(
        r#"
dataset = "smoke"
task = "single"
stage = "finetune"
data = "{data}"
gt = "{gt}"
epochs = 3
batch_size = 8
lr = 1e-3
gamma = 0.9
lr_step = 10
hidden_size = 8
seeds = [1]

[pretrain]
epochs = 3
batch_size = 8
lr = 1e-3
gamma = 0.9
lr_step = 10
l2_weight = 0.0
dropout = 0.0
"#,
        data = dir.join("data.npy").display(),
        gt = dir.join("gt.npy").display(),
    );
    std::fs::write(dir.join("config.toml"), toml).unwrap();
}

#[test]
fn pipeline_happy_path() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path());
    write_config(dir.path());

    let out = hsic(&["sample-patches", "--config", "config.toml"], dir.path());
    assert!(out.status.success(), "sample-patches: {}", stderr_of(&out));
    assert!(dir.path().join("out/patches").is_dir());

    let out = hsic(&["pretrain", "--config", "config.toml"], dir.path());
    assert!(out.status.success(), "pretrain: {}", stderr_of(&out));

    let out = hsic(
        &["finetune", "--config", "config.toml", "--mode", "cl-freeze"],
        dir.path(),
    );
    assert!(out.status.success(), "finetune: {}", stderr_of(&out));
    let results = dir.path().join("out/results.csv");
    assert!(results.is_file());

    let before = std::fs::read_to_string(&results).unwrap();
    let out = hsic(&["report", "--out", "out"], dir.path());
    assert!(out.status.success(), "report: {}", stderr_of(&out));
    let after = std::fs::read_to_string(&results).unwrap();
    let sorted = |s: &str| {
        let mut v: Vec<&str> = s.lines().collect();
        v.sort();
        v.join("\n")
    };
    assert_eq!(sorted(&before), sorted(&after));

    let ckpt = std::fs::read_dir(dir.path().join("out/checkpoints"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let out = hsic(
        &[
            "export-embeddings",
            "--config",
            "config.toml",
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(out.status.success(), "export-embeddings: {}", stderr_of(&out));
    assert!(dir.path().join("out/embeddings.csv").is_file());
}

#[test]
fn missing_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = hsic(&["pretrain", "--config", "nope.toml"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("error category=invalid-config"));
}

#[test]
fn missing_data_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path());
    write_config(dir.path());
    std::fs::remove_file(dir.path().join("data.npy")).unwrap();
    let out = hsic(&["pretrain", "--config", "config.toml"], dir.path());
    assert_eq!(out.status.code(), Some(4), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("error category=dataset-not-found"));
}

#[test]
fn finetune_without_checkpoint_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path());
    write_config(dir.path());
    let out = hsic(&["finetune", "--config", "config.toml"], dir.path());
    assert_eq!(out.status.code(), Some(5), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("error category=checkpoint-mismatch"));
}

#[test]
fn bad_usage_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = hsic(&["no-such-command"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
