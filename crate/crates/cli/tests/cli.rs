use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nasklab::pipeline::load_checkpoint;
use nasklab::synth::read_dataset;

fn nasklab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nasklab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("NASKLAB_DATA")
        .output()
        .expect("run nasklab")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = nasklab(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            let bytes = fs::read(&path).unwrap();
            out.push((path.strip_prefix(dir).unwrap().to_path_buf(), bytes));
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_count_pairs_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth", "--count", "20", "--out", "a", "--seed", "5"], tmp.path());
    ok(&["synth", "--count", "20", "--out", "b", "--seed", "5"], tmp.path());
    let a = tmp.path().join("a");
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 20);
    assert_eq!(fs::read_dir(a.join("gt")).unwrap().count(), 20);
    let (fa, fb) = (files(&a), files(&tmp.path().join("b")));
    assert!(fa == fb);

    ok(&["synth", "--count", "0", "--out", "empty"], tmp.path());
    assert!(read_dataset(&tmp.path().join("empty")).unwrap().is_empty());
}

#[test]
fn bad_synth_spec_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("spec.toml"), "char_count = [9, 2]\n").unwrap();
    let out = nasklab(&["synth", "--spec", "spec.toml", "--out", "d"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth", "--count", "3", "--out", "ds"], tmp.path());
    let stdout = ok(&["eval", "--preds", "ds/gt", "--gts", "ds"], tmp.path());
    assert!(stdout.contains("H=1.000"), "{stdout}");
}

#[test]
fn zero_epoch_training_then_detection_on_a_blank_image() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth", "--count", "2", "--out", "ds"], tmp.path());
    ok(&["train", "--data", "ds", "--epochs", "0", "--out", "run"], tmp.path());
    let run = tmp.path().join("run");
    let model = load_checkpoint(&run.join("checkpoint.json")).unwrap();
    assert_eq!(model.config.groups, 4);
    assert!(run.join("run_config.toml").exists());
    let log = fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1);

    image::GrayImage::new(128, 64).save(tmp.path().join("blank.png")).unwrap();
    ok(&["detect", "--checkpoint", "run/checkpoint.json", "--out", "det", "blank.png"], tmp.path());
    assert_eq!(fs::read_to_string(tmp.path().join("det/blank.txt")).unwrap(), "");
    assert!(tmp.path().join("det/run_config.toml").exists());
}

#[test]
fn dataset_root_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth", "--count", "1", "--out", "ds"], tmp.path());
    let out = Command::new(env!("CARGO_BIN_EXE_nasklab"))
        .args(["train", "--epochs", "0", "--out", "run"])
        .current_dir(tmp.path())
        .env("NASKLAB_DATA", tmp.path().join("ds"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = nasklab(&["train", "--epochs", "0", "--out", "run2"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth", "--count", "1", "--out", "ds"], tmp.path());
    fs::write(tmp.path().join("run.toml"), "groups = 2\nseed = 1\nstage = \"first-only\"\n").unwrap();
    ok(
        &["train", "--config", "run.toml", "--data", "ds", "--epochs", "0", "--groups", "8", "--out", "run"],
        tmp.path(),
    );
    let saved = fs::read_to_string(tmp.path().join("run/run_config.toml")).unwrap();
    assert!(saved.contains("groups = 8"));
    assert!(saved.contains("seed = 1"));
    assert!(saved.contains("stage = \"first-only\""));
}

#[test]
fn module_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.toml"), "groups = 3\n").unwrap();
    assert_eq!(nasklab(&["train", "--config", "run.toml", "--data", "."], tmp.path()).status.code(), Some(2));
    assert_eq!(nasklab(&["detect", "--checkpoint", "missing.json", "x.png"], tmp.path()).status.code(), Some(1));
    assert_eq!(nasklab(&["ablate", "--axis", "gamma"], tmp.path()).status.code(), Some(2));
}

#[test]
fn stage_ablation_emits_one_row_per_setting() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth", "--count", "2", "--out", "ds"], tmp.path());
    let stdout = ok(&["ablate", "--axis", "stage", "--data", "ds", "--epochs", "0", "--out", "abl"], tmp.path());
    let table = fs::read_to_string(tmp.path().join("abl/ablation_stage.tsv")).unwrap();
    assert_eq!(stdout, table);
    let settings: Vec<&str> = table.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(settings, ["both", "first-only", "second-only"]);
    assert!(tmp.path().join("abl/run_config.toml").exists());
}
