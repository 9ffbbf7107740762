use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use tempfile::TempDir;

const TINY: &str = r#"{
  "dataset": {"count": 20, "height": 32, "width": 32},
  "train": {"epochs": 16},
  "corruption": {"proportions": [0.25]},
  "seeds": [3]
}"#;

fn vogseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vogseg")).args(args).output().expect("spawn vogseg")
}

fn ok(args: &[&str]) -> String {
    let out = vogseg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    vogseg(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &TempDir) -> PathBuf {
    let path = dir.path().join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn generate_is_seeded_and_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(&dir);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let da = ok(&["generate", "--config", s(&cfg), "--seed", "1", "--out", s(&a)]);
    let db = ok(&["generate", "--config", s(&cfg), "--seed", "1", "--out", s(&b)]);
    let dc = ok(&["generate", "--config", s(&cfg), "--seed", "2", "--out", s(&c)]);
    assert_eq!(da, db);
    assert_ne!(da, dc);
    assert_eq!(da.trim().len(), 64);
}

#[test]
fn generating_two_hundred_phantoms_is_fast() {
    let dir = TempDir::new().unwrap();
    let start = Instant::now();
    ok(&["generate", "--seed", "0", "--out", s(&dir.path().join("d"))]);
    assert!(start.elapsed() < Duration::from_secs(30));
}

#[test]
fn non_empty_output_requires_force() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(&dir);
    let out = dir.path().join("d");
    ok(&["generate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&["generate", "--config", s(&cfg), "--out", s(&out)]), 2);
    ok(&["generate", "--config", s(&cfg), "--out", s(&out), "--force"]);
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epochs": "many"}}"#).unwrap();
    assert_eq!(code(&["generate", "--config", s(&bad), "--out", s(&dir.path().join("x"))]), 2);

    let missing = dir.path().join("missing");
    let out = dir.path().join("y");
    assert_eq!(code(&["train", "--data", s(&missing), "--out", s(&out)]), 3);

    let cfg = tiny_config(&dir);
    let data = dir.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let explosive = dir.path().join("explosive.json");
    let mut value: serde_json::Value = serde_json::from_str(TINY).unwrap();
    value["train"]["learning_rate"] = serde_json::json!(1e30);
    fs::write(&explosive, value.to_string()).unwrap();
    let out = dir.path().join("z");
    assert_eq!(code(&["train", "--config", s(&explosive), "--data", s(&data), "--out", s(&out)]), 4);
}

#[test]
fn generate_corrupt_train_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(&dir);
    let (clean, noisy, run) = (dir.path().join("clean"), dir.path().join("noisy"), dir.path().join("run"));
    let clean_digest = ok(&["generate", "--config", s(&cfg), "--out", s(&clean)]);
    let noisy_digest = ok(&[
        "corrupt", "--config", s(&cfg), "--data", s(&clean), "--kind", "merged", "--mode", "systematic",
        "--proportion", "0.5", "--out", s(&noisy),
    ]);
    assert_ne!(clean_digest, noisy_digest);
    assert!(noisy.join("corruption.json").exists());

    ok(&[
        "train", "--config", s(&cfg), "--data", s(&noisy), "--pipeline", "refurb", "--detector", "loss", "--out",
        s(&run),
    ]);
    for name in [
        "run.json",
        "test_dice.csv",
        "events.jsonl",
        "model.ckpt",
        "detection_vog_epoch015.csv",
        "detection_loss_epoch015.csv",
    ] {
        assert!(run.join(name).exists(), "missing {name}");
    }
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["pipeline"], "refurbished");
    assert_eq!(record["dataset_digest"].as_str().unwrap(), noisy_digest.trim());
    let events = fs::read_to_string(run.join("events.jsonl")).unwrap();
    assert_eq!(events.lines().count(), 1);
}

#[test]
fn exp1_reports_one_row_per_type_and_detector_and_rerenders() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(&dir);
    let out = dir.path().join("exp1");
    ok(&["exp1", "--config", s(&cfg), "--out", s(&out)]);
    let rows = csv_rows(&out.join("table1.csv"));
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r[0] == "random"));

    let again = dir.path().join("again");
    ok(&["report", "--input", s(&out.join("report.json")), "--out", s(&again)]);
    for name in ["table1.csv", "detection_epochs.csv", "test_dice.csv"] {
        assert_eq!(fs::read(out.join(name)).unwrap(), fs::read(again.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn exp3_stars_only_significant_improvements() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("merged.json");
    let mut value: serde_json::Value = serde_json::from_str(TINY).unwrap();
    value["corruption"]["kinds"] = serde_json::json!(["merged"]);
    fs::write(&cfg, value.to_string()).unwrap();
    let out = dir.path().join("exp3");
    ok(&["exp3", "--config", s(&cfg), "--out", s(&out)]);
    let rows = csv_rows(&out.join("wilcoxon.csv"));
    assert_eq!(rows.len(), 2 * 4);
    for r in rows {
        let (baseline, refurbished, p): (f64, f64, f64) =
            (r[5].parse().unwrap(), r[6].parse().unwrap(), r[9].parse().unwrap());
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(r[11] == "*", p < 0.05 && refurbished > baseline, "{r:?}");
    }
}
