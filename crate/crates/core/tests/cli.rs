//! End-to-end runs of the binary: exit codes, resolved-config output and
//! the degenerate training run.

use std::path::Path;
use std::process::{Command, Output};

fn wd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weatherdiff"))
        .args(args)
        .env_remove("WEATHERDIFF_DATA")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&wd(&[])), 1);
    assert_eq!(code(&wd(&["frobnicate"])), 1);
    assert_eq!(code(&wd(&["gen-data", "--out", "x", "--bogus"])), 1);
    assert_eq!(code(&wd(&["restore", "--model", "m"])), 1);
    assert_eq!(code(&wd(&["--help"])), 0);
    assert_eq!(code(&wd(&["train", "--help"])), 0);
}

#[test]
fn selfcheck_passes_and_prints_a_table() {
    let o = wd(&["selfcheck"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let out = text(&o);
    for name in ["schedule constraints", "terminal-state identity", "oracle-sampler exactness", "Top(P) semantics", "load-balance closed forms", "EMA closed form"] {
        assert!(out.contains(&format!("PASS  {name}")), "{out}");
    }
}

#[test]
fn restore_rejects_a_non_image_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("notes.png");
    std::fs::write(&bogus, b"this is not a png").unwrap();
    let o = wd(&["restore", "--model", p(&bogus), "--input", p(&bogus), "--output", p(&dir.path().join("o.png"))]);
    assert_eq!(code(&o), 2);
    assert!(text(&o).contains("error"));
    assert!(!dir.path().join("o.png").exists());
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = wd(&["train", "--data", p(&dir.path().join("nope")), "--ablate", "wpg", "--out", p(&dir.path().join("m"))]);
    assert_eq!(code(&o), 2, "{}", text(&o));
}

#[test]
fn guidance_without_prompts_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = wd(&["train", "--data", p(dir.path()), "--iters", "0", "--out", p(&dir.path().join("m"))]);
    assert_eq!(code(&o), 1, "{}", text(&o));
    assert!(text(&o).contains("--prompts"));
}

#[test]
fn data_root_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert_eq!(code(&wd(&["gen-data", "--out", p(&data), "--per-class", "2", "--size", "16"])), 0);
    let out = dir.path().join("m.safetensors");
    let o = Command::new(env!("CARGO_BIN_EXE_weatherdiff"))
        .args(["train", "--iters", "0", "--ablate", "wpg,desm", "--crop", "16", "--out", p(&out)])
        .env("WEATHERDIFF_DATA", &data)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(out.is_file());
}

#[test]
fn full_cli_round_trip_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = wd(&["gen-data", "--out", p(&data), "--per-class", "4", "--size", "16", "--seed", "3", "--test-fraction", "0.25"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("seed = 3"));

    let prompts = dir.path().join("prompts.safetensors");
    let o = wd(&[
        "train-prompts", "--data", p(&data), "--iters", "3", "--batch", "4", "--image-size", "16",
        "--tokens", "4", "--width", "16", "--out", p(&prompts),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("held-out accuracy"));

    // zero iterations still writes a loadable checkpoint of the initial model
    let model = dir.path().join("model.safetensors");
    let o = wd(&[
        "train", "--data", p(&data), "--prompts", p(&prompts), "--iters", "0", "--base-channels", "4",
        "--crop", "16", "--batch", "2", "--seed", "9", "--out", p(&model),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("# resolved config") && out.contains("seed = 9") && out.contains("iterations = 0"), "{out}");

    let log = dir.path().join("log.jsonl");
    let o = wd(&["train", "--data", p(&data), "--resume", p(&model), "--iters", "2", "--log", p(&log), "--out", p(&model)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("start step 0"));
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert!(log_text.lines().last().unwrap().contains("\"iter\":2"));
    let o = wd(&["train", "--data", p(&data), "--resume", p(&model), "--lr", "1", "--out", p(&model)]);
    assert_eq!(code(&o), 1);

    let degraded = data.join("degraded/00000.png");
    let restored = dir.path().join("r.png");
    let o = wd(&["restore", "--model", p(&model), "--input", p(&degraded), "--output", p(&restored), "--steps", "2"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(restored.is_file());

    let report = dir.path().join("report.json");
    let csv = dir.path().join("scores.csv");
    let o = wd(&["eval", "--model", p(&model), "--data", p(&data), "--report", p(&report), "--csv", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["samples"], 3);
    assert_eq!(r["steps"], 3);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
}
