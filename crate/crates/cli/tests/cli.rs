use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn reconscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reconscan"))
        .args(args)
        .env_remove("RECONSCAN_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = reconscan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error line on stderr");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small desk-scale cohort: 4 healthy and 2 anomalous subjects, one scan each.
fn cohort(dir: &Path) {
    ok(&[
        "phantom",
        "--out",
        s(dir),
        "--healthy",
        "4",
        "--anomalous",
        "2",
        "--timepoints",
        "1",
        "--seed",
        "3",
    ]);
}

#[test]
fn prepare_reports_window_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("cohort");
    cohort(&data);
    let out = tmp.path().join("windows");
    let manifest = data.join("manifest.csv");
    let text = ok(&[
        "prepare",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--range",
        "desk",
        "--holdout",
        "1",
    ]);
    assert!(text.contains("33 train windows"), "{text}");
    let scans: Vec<&str> = text
        .lines()
        .filter(|l| l.contains("windows") && l.starts_with("  "))
        .collect();
    assert_eq!(scans.len(), 6);
    assert!(
        scans.iter().all(|l| l.trim_end().ends_with("11 windows")),
        "{text}"
    );
    assert!(out.join("axial/train.rsw").is_file());
    assert!(out.join("axial/split.json").is_file());
}

#[test]
fn missing_manifest_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.csv");
    let out = reconscan(&["prepare", "--manifest", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    let err = error_json(&out);
    assert_eq!(err["error"]["code"], "FORMAT_ERROR");
    assert_eq!(err["error"]["exit_code"], 3);
}

#[test]
fn unusual_lengths_need_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("cohort");
    cohort(&data);
    let manifest = data.join("manifest.csv");
    let out = tmp.path().join("w");
    let args = [
        "prepare",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--range",
        "desk",
        "--in-len",
        "4",
    ];
    let refused = reconscan(&args);
    assert_eq!(refused.status.code(), Some(2));
    assert_eq!(error_json(&refused)["error"]["code"], "CONFIG_ERROR");
    let text = ok(&[&args[..], &["--any-lengths"]].concat());
    assert!(text.contains("10 windows"), "{text}");
}

#[test]
fn seed_comes_from_environment_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, "seed = 11\n[cohort]\nhealthy_subjects = 2\nanomalous_subjects = 1\ntimepoints = 1\nextent = [32, 32, 32]\n").unwrap();
    let a = tmp.path().join("a");
    ok(&["--config", s(&config), "phantom", "--out", s(&a)]);
    let spec: Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("cohort.json")).unwrap()).unwrap();
    assert_eq!(spec["seed"], 11);
    assert_eq!(spec["healthy_subjects"], 2);

    let b = tmp.path().join("b");
    let out = Command::new(env!("CARGO_BIN_EXE_reconscan"))
        .args(["--config", s(&config), "phantom", "--out", s(&b)])
        .env("RECONSCAN_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success());
    let spec: Value =
        serde_json::from_str(&std::fs::read_to_string(b.join("cohort.json")).unwrap()).unwrap();
    assert_eq!(spec["seed"], 42);

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"sede": 1}"#).unwrap();
    let out = reconscan(&["--config", s(&bad), "phantom", "--out", s(&b)]);
    assert_eq!(error_json(&out)["error"]["code"], "FORMAT_ERROR");
}

#[test]
fn train_score_evaluate_explain_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("cohort");
    cohort(&data);
    let w = tmp.path().join("w");
    let manifest = data.join("manifest.csv");
    ok(&[
        "prepare",
        "--manifest",
        s(&manifest),
        "--out",
        s(&w),
        "--range",
        "desk",
        "--holdout",
        "1",
    ]);
    let ckpt = tmp.path().join("model.ckpt");
    let train = w.join("axial/train.rsw");
    let test = w.join("axial/test.rsw");
    let summary: Value = serde_json::from_str(&ok(&[
        "train",
        "--archive",
        s(&train),
        "--out",
        s(&ckpt),
        "--model",
        "unet33",
        "--base-width",
        "4",
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--seed",
        "1",
    ]))
    .unwrap();
    assert_eq!(summary["model"], "UNET33");
    assert!(tmp.path().join("model.history.json").is_file());

    let train_csv = tmp.path().join("train.csv");
    let test_csv = tmp.path().join("test.csv");
    ok(&[
        "score",
        "--checkpoint",
        s(&ckpt),
        "--archive",
        s(&train),
        "--out",
        s(&train_csv),
    ]);
    ok(&[
        "score",
        "--checkpoint",
        s(&ckpt),
        "--archive",
        s(&test),
        "--out",
        s(&test_csv),
    ]);

    let report = |name: &str, extra: &[&str]| {
        let path = tmp.path().join(name);
        let args = [
            &[
                "evaluate",
                "--train-scores",
                s(&train_csv),
                "--test-scores",
                s(&test_csv),
                "--out",
                s(&path),
            ],
            extra,
        ]
        .concat();
        let text = ok(&args);
        assert!(text.contains("axial"), "{text}");
        std::fs::read_to_string(path).unwrap()
    };
    let first = report("a.json", &[]);
    let second = report("b.json", &[]);
    assert_eq!(first, second);
    let parsed: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(
        parsed["planes"][0]["confusion"]["tp"].as_u64().unwrap()
            + parsed["planes"][0]["confusion"]["fn"].as_u64().unwrap(),
        2
    );
    let strict: Value = serde_json::from_str(&report("c.json", &["--strict-paper"])).unwrap();
    assert_eq!(strict["policy"]["tie"], "OUTLIER");

    let single = reconscan(&[
        "evaluate",
        "--train-scores",
        s(&train_csv),
        "--test-scores",
        s(&train_csv),
    ]);
    assert_ne!(single.status.code(), Some(0));
    assert_eq!(error_json(&single)["error"]["code"], "SINGLE_CLASS_ERROR");

    let pics = tmp.path().join("explain");
    let info: Value = serde_json::from_str(&ok(&[
        "explain",
        "--checkpoint",
        s(&ckpt),
        "--archive",
        s(&test),
        "--out",
        s(&pics),
        "--window",
        "2",
    ]))
    .unwrap();
    assert!(Path::new(info["grid"].as_str().unwrap()).is_file());
    assert_eq!(info["saliency"].as_array().unwrap().len(), 1);
    let wrong = reconscan(&[
        "explain",
        "--checkpoint",
        s(&ckpt),
        "--archive",
        s(&test),
        "--out",
        s(&pics),
        "--layer",
        "sa4",
    ]);
    assert_eq!(error_json(&wrong)["error"]["code"], "LAYER_ERROR");
}

#[test]
fn sweep_covers_each_combination() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("cohort");
    cohort(&data);
    let report = tmp.path().join("sweep.json");
    let manifest = data.join("manifest.csv");
    let text = ok(&[
        "sweep",
        "--manifest",
        s(&manifest),
        "--range",
        "desk",
        "--holdout",
        "1",
        "--base-width",
        "4",
        "--epochs",
        "1",
        "--combos",
        "3-3,5-5",
        "--out",
        s(&report),
    ]);
    assert!(text.contains("3-3") && text.contains("5-5"), "{text}");
    let parsed: Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    let results = parsed["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    // 16 slices: 11 windows per scan at 3-3, 7 at 5-5, three training scans.
    assert_eq!(results[0]["train_windows"], 33);
    assert_eq!(results[1]["train_windows"], 21);
}
