use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const TINY: &str = r#"{
  "diffusion": {"steps": 10, "embedding_width": 4, "hidden": 16, "train": {"epochs": 2, "batch_size": 50}},
  "classifier": {"hidden": 8, "train": {"epochs": 2, "batch_size": 50}},
  "plausibility": {"hidden": 8, "train": {"epochs": 1, "batch_size": 50}},
  "vae": {"hidden": 8, "latent": 2, "train": {"epochs": 1, "batch_size": 50}},
  "baselines": {"wachter": {"steps": 4}, "dice": {"steps": 4}, "dice_vae": {"steps": 4}},
  "ablation": {"inputs": 2, "taus": [3, 5], "counts": [2, 3]}
}"#;

fn tabcf(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_tabcf"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tabcf(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A directory with benchmark data, a tiny config, and trained models.
fn workspace() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        ok(&dir, &["synth", "--out", "data.csv", "--rows", "200", "--config-out", "data.json"]);
        let data: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("data.json")).unwrap()).unwrap();
        let mut cfg: Value = serde_json::from_str(TINY).unwrap();
        cfg["data"] = data["data"].clone();
        std::fs::write(dir.join("tiny.json"), cfg.to_string()).unwrap();
        ok(&dir, &["--config", "tiny.json", "train-diffusion"]);
        ok(&dir, &["--config", "tiny.json", "train-classifier"]);
        ok(&dir, &["--config", "tiny.json", "train-plausibility"]);
        ok(&dir, &["--config", "tiny.json", "train-vae"]);
        dir
    })
}

#[test]
fn staged_training_writes_every_checkpoint() {
    let dir = workspace();
    for f in [
        "diffusion.ckpt",
        "classifier.ckpt",
        "plausibility-recurrent.ckpt",
        "plausibility-transformer.ckpt",
        "vae.ckpt",
    ] {
        assert!(dir.join("models").join(f).exists(), "{f}");
    }
    let schema: Value = serde_json::from_str(&ok(dir, &["schema", "--models", "models"])).unwrap();
    assert_eq!(schema["label"], "y");
    let from_data: Value =
        serde_json::from_str(&ok(dir, &["--config", "tiny.json", "schema"])).unwrap();
    assert_eq!(schema, from_data);
}

#[test]
fn generate_is_deterministic_given_seed() {
    let dir = workspace();
    let args = [
        "--config", "tiny.json", "--seed", "9", "generate", "--row-index", "3", "--target", "1",
    ];
    let a = ok(dir, &args);
    let b = ok(dir, &args);
    assert_eq!(a, b);
    let view: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(view["seed"], 9);
    assert_eq!(view["rows"].as_array().unwrap().len(), 4);

    let mut dice = args.to_vec();
    dice.extend(["--method", "dice"]);
    assert_eq!(ok(dir, &dice), ok(dir, &dice));
}

#[test]
fn generate_reports_bad_rows_by_column() {
    let dir = workspace();
    let out = tabcf(dir, &["generate", "--row", "a1,b9,50,20,e2,abc", "--target", "1"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("b: unknown value `b9`"), "{err}");
    assert!(err.contains("f: expected a finite number"), "{err}");
}

#[test]
fn ablate_loss_drop_has_four_cells_per_method() {
    let dir = workspace();
    let text = ok(
        dir,
        &["--config", "tiny.json", "ablate", "--grid", "loss-drop", "--target", "1", "--csv", "cells.csv"],
    );
    let cells: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(cells.len(), 8);
    for m in ["scd", "dice"] {
        let settings: Vec<&str> = cells
            .iter()
            .filter(|c| c["method"] == m)
            .map(|c| c["setting"].as_str().unwrap())
            .collect();
        assert_eq!(settings, ["all", "no-validity", "no-proximity", "no-diversity"]);
    }
    let csv = std::fs::read_to_string(dir.join("cells.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn evaluate_identical_rows() {
    let dir = workspace();
    let gen: Value = serde_json::from_str(&ok(
        dir,
        &["--config", "tiny.json", "generate", "--row-index", "0", "--target", "0"],
    ))
    .unwrap();
    let cols = ["a", "b", "c", "d", "e", "f"];
    let x = cols
        .iter()
        .map(|c| match &gen["input"][c] {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        })
        .collect::<Vec<_>>()
        .join(",");
    std::fs::write(dir.join("same.csv"), format!("{}\n{x}\n{x}\n", cols.join(","))).unwrap();
    let mut validities = vec![];
    for target in ["0", "1"] {
        let report: Value = serde_json::from_str(&ok(
            dir,
            &["evaluate", "--row", &x, "--rows", "same.csv", "--target", target],
        ))
        .unwrap();
        assert_eq!(report["proximity"], 1.0);
        assert_eq!(report["diversity"], 0.0);
        validities.push(report["validity"].as_f64().unwrap());
    }
    // The classifier assigns x to exactly one of the two classes.
    validities.sort_by(f64::total_cmp);
    assert_eq!(validities, [0.0, 1.0]);
}

#[test]
fn sample_is_deterministic() {
    let dir = workspace();
    let a = ok(dir, &["--seed", "4", "sample", "--count", "5"]);
    assert_eq!(a, ok(dir, &["--seed", "4", "sample", "--count", "5"]));
    assert_eq!(a.lines().count(), 6);
    assert!(a.starts_with("a,b,c,d,e,f"));
}

#[test]
fn mismatched_data_names_the_expected_digest() {
    let dir = workspace();
    let diffusion = std::fs::read(dir.join("models/diffusion.ckpt")).unwrap();
    let out = tabcf(
        dir,
        &["--config", "tiny.json", "train-classifier", "--bins", "3"],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let schema: Value = serde_json::from_str(&ok(dir, &["schema", "--models", "models"])).unwrap();
    assert!(err.contains(schema["digest"].as_str().unwrap()), "{err}");
    assert_eq!(std::fs::read(dir.join("models/diffusion.ckpt")).unwrap(), diffusion);
}
