mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::*;
use qsnn::config::PRESET_NAMES;
use qsnn::TrainConfig;

fn qsnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsnn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_tiny(dir: &Path, precision: &str) -> String {
    let path = dir.join(format!("tiny-{precision}.toml"));
    fs::write(&path, tiny_config(precision).to_toml_string().unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn preset_lists_and_prints() {
    let listed = stdout(&qsnn(&["preset"]));
    assert_eq!(listed.lines().collect::<Vec<_>>(), PRESET_NAMES);
    for name in PRESET_NAMES {
        let text = stdout(&qsnn(&["preset", name]));
        assert_eq!(
            TrainConfig::from_toml_str(&text).unwrap(),
            TrainConfig::preset(name).unwrap()
        );
    }
    assert!(!qsnn(&["preset", "nope"]).status.success());
}

#[test]
fn shipped_configs_match_presets() {
    let dir = repo_root().join("configs");
    for name in PRESET_NAMES {
        let from_file = TrainConfig::from_file(dir.join(format!("{name}.toml"))).unwrap();
        let mut expected = TrainConfig::preset(name).unwrap();
        expected.resolve_paths(&dir.join(".."));
        assert_eq!(from_file, expected, "{name}");
    }
}

#[test]
fn train_then_eval_reports_the_same_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path(), "int4");
    let out = dir.path().join("run");
    let text = stdout(&qsnn(&[
        "train",
        "--config",
        &cfg,
        "--seed",
        "5",
        "--epochs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]));
    for f in ["run.csv", "epochs.csv", "model.ckpt", "metadata.toml"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let meta: toml::Value = toml::from_str(&fs::read_to_string(out.join("metadata.toml")).unwrap()).unwrap();
    assert_eq!(meta["seed"].as_integer(), Some(5));
    assert_eq!(meta["epochs_run"].as_integer(), Some(2));
    let acc = 100.0 * meta["test_accuracy"].as_float().unwrap();
    assert!(text.starts_with(&format!("test accuracy {acc:.2}%")), "{text}");

    // The checkpoint was trained with seed 5; eval with a matching config.
    let mut eval_cfg = tiny_config("int4");
    eval_cfg.seed = 5;
    let eval_path = dir.path().join("eval.toml");
    fs::write(&eval_path, eval_cfg.to_toml_string().unwrap()).unwrap();
    let ckpt = out.join("model.ckpt");
    let text = stdout(&qsnn(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        eval_path.to_str().unwrap(),
    ]));
    assert!(text.starts_with(&format!("test accuracy {acc:.2}%")), "{text}");
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let o = qsnn(&["train", "--config", "/nonexistent.toml"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
    let o = qsnn(&[
        "train",
        "--config",
        "preset:dvs128-flt32",
        "--out",
        "/tmp/never-written",
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("config error"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"QSNNCKPT\x01").unwrap();
    let cfg = write_tiny(dir.path(), "flt32");
    let o = qsnn(&["eval", "--checkpoint", bad.to_str().unwrap(), "--config", &cfg]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

#[test]
fn matrix_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny(dir.path(), "flt32");
    write_tiny(dir.path(), "int4");
    let matrix = dir.path().join("matrix.toml");
    fs::write(
        &matrix,
        "flt32_config = \"tiny-flt32.toml\"\nint4_config = \"tiny-int4.toml\"\n\
         schedules = [\"cosine\"]\nseeds = [0, 1]\nepochs = 1\nout_dir = \"out\"\n",
    )
    .unwrap();
    let text = stdout(&qsnn(&["matrix", "--config", matrix.to_str().unwrap()]));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "dataset,precision,schedule,n,best,avg,sigma,failures");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("mnist,flt32,"), "{}", lines[1]);
    assert!(lines[2].starts_with("mnist,int4,"), "{}", lines[2]);
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!((cols[2], cols[3], cols[7]), ("Cosine", "2", "0"), "{l}");
    }
    let out = dir.path().join("out");
    assert_eq!(fs::read_to_string(out.join("results.csv")).unwrap(), text);
    assert!(out.join("runs.csv").is_file());
    assert!(out.join("int4-cosine-seed1/model.ckpt").is_file());
}
