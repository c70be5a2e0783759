use std::path::Path;
use std::process::{Command, Output};

fn sdsv(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sdsv"));
    cmd.args(args).current_dir(dir);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("SDSV_")) {
        cmd.env_remove(k);
    }
    cmd.output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = sdsv(dir, args);
    assert!(out.status.success(), "sdsv {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdsv(dir.path(), &["score", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_config_value_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[ubm]\ncomponents = 0\n").unwrap();
    let out = sdsv(dir.path(), &["--preset", "S3", "--config", "bad.toml", "show-config"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ubm.components"));
}

#[test]
fn unknown_preset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdsv(dir.path(), &["--preset", "S9", "show-config"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn show_config_reflects_overlay() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("o.toml"), "[ubm]\ncomponents = 16\n").unwrap();
    let text = ok(dir.path(), &["--preset", "S3", "--config", "o.toml", "show-config"]);
    let table: toml::Table = text.parse().unwrap();
    assert_eq!(table["ubm"]["components"].as_integer(), Some(16));
}

#[test]
fn gmm_ubm_chain_scores_every_trial_and_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--out", "c", "--speakers", "5", "--phrases", "3", "--utts", "5", "--duration", "0.4", "--mode", "feature", "--seed", "2"]);
    ok(dir, &["dev-split", "--manifest", "c/manifest.txt", "--out", "dev", "--speakers", "2", "--seed", "1"]);
    std::fs::write(dir.join("small.toml"), "[ubm]\ncomponents = 4\nem_iters = 3\n").unwrap();
    let o = ["--preset", "S3", "--config", "small.toml", "--work", "w"];
    let with = |rest: &[&'static str]| -> Vec<&str> { o.iter().chain(rest).copied().collect() };
    ok(dir, &with(&["train-ubm", "--train", "dev/train.txt"]));
    ok(dir, &with(&["enroll", "--models", "dev/models.txt", "--manifest", "c/manifest.txt"]));
    ok(dir, &with(&["score", "--models", "dev/models.txt", "--trials", "dev/trials.txt", "--manifest", "c/manifest.txt", "--out", "s.txt"]));

    let trials = std::fs::read_to_string(dir.join("dev/trials.txt")).unwrap();
    let scores = std::fs::read_to_string(dir.join("s.txt")).unwrap();
    assert_eq!(scores.lines().count(), trials.lines().count());
    for line in scores.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(f.len(), 3);
        assert!(f[2].parse::<f64>().unwrap().is_finite());
    }

    let table = ok(dir, &["evaluate", "--scores", "s.txt", "--trials", "dev/trials.txt", "--title", "S3", "--det", "det.txt"]);
    assert!(table.contains("S3"));
    for row in ["TW", "IC", "IW", "Pooled"] {
        assert!(table.contains(row), "{table}");
    }
    let det = std::fs::read_to_string(dir.join("det.txt")).unwrap();
    assert!(det.lines().all(|l| l.split_whitespace().count() == 2));

    let uv = ok(dir, &["evaluate", "--scores", "s.txt", "--trials", "dev/trials.txt", "--uv"]);
    assert!(uv.contains("UV EER"));
}

#[test]
fn score_with_missing_models_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--out", "c", "--speakers", "4", "--phrases", "2", "--utts", "4", "--duration", "0.3", "--mode", "feature"]);
    ok(dir, &["dev-split", "--manifest", "c/manifest.txt", "--out", "dev", "--speakers", "2"]);
    let out = sdsv(
        dir,
        &["--preset", "S3", "--work", "empty", "score", "--models", "dev/models.txt", "--trials", "dev/trials.txt", "--manifest", "c/manifest.txt", "--out", "s.txt"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(!dir.join("s.txt").exists());
}
