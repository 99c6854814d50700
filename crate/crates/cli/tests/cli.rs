//! End-to-end runs of the `saliency-sanity` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sanity_core::detector::{load_checkpoint, Detector, DetectorConfig};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saliency-sanity"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert_eq!(code(&out), 0, "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

/// Untrained detectors score low; this keeps some of their detections.
const LOW: &str = "0.001";

/// A small dataset plus an untouched-initialization checkpoint trained
/// with learning rate 0.
fn fixture(tmp: &TempDir) -> (PathBuf, PathBuf) {
    let data = tmp.path().join("data");
    ok(&["generate", "--count", "4", "--seed", "3", "--out", s(&data)]);
    let run_dir = tmp.path().join("run");
    let out = run(&["train", "--dataset", s(&data), "--out", s(&run_dir), "--epochs", "1", "--lr", "0"]);
    // The mAP target cannot be reached without learning: a warning, not an error.
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget exhausted"));
    (data, run_dir.join("checkpoint.json"))
}

#[test]
fn generate_is_deterministic_and_writes_two_files_per_scene() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["generate", "--count", "5", "--seed", "9", "--out", s(&a)]);
    ok(&["generate", "--count", "5", "--seed", "9", "--out", s(&b)]);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 2 * 5 + 1);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn bad_arguments_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["generate", "--count", "0", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&run(&["generate", "--no-such-flag"])), 1);
    assert_eq!(code(&run(&["explain", "--checkpoint", "missing.json"])), 1);
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let tmp = TempDir::new().unwrap();
    let out = run(&[
        "explain",
        "--checkpoint",
        s(&tmp.path().join("missing.json")),
        "--image",
        s(&tmp.path().join("missing.png")),
        "--out",
        s(&tmp.path().join("out")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn zero_learning_rate_checkpoint_is_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let (_, checkpoint) = fixture(&tmp);
    let loaded = load_checkpoint(&checkpoint).unwrap();
    assert_eq!(loaded, Detector::build(DetectorConfig::default()).unwrap());
    let run_dir = checkpoint.parent().unwrap();
    for name in ["loss_trace.csv", "train_summary.json", "manifest.txt"] {
        assert!(run_dir.join(name).exists(), "{name}");
    }
}

#[test]
fn explain_writes_one_map_per_decision_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (data, checkpoint) = fixture(&tmp);
    let image = data.join("scene_0000.png");
    let explain = |method: &str, out: &Path, extra: &[&str]| {
        let mut args = vec![
            "explain",
            "--checkpoint",
            s(&checkpoint),
            "--image",
            s(&image),
            "--method",
            method,
            "--score-threshold",
            LOW,
            "--out",
            s(out),
        ];
        args.extend_from_slice(extra);
        ok(&args);
    };
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    explain("gbp", &first, &[]);
    explain("gbp", &second, &[]);

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(first.join("detections.json")).unwrap()).unwrap();
    let detections = report["detections"].as_array().unwrap().len();
    assert!(detections > 0);
    let pngs: Vec<PathBuf> = files(&first).into_iter().filter(|p| p.extension().unwrap() == "png").collect();
    assert_eq!(pngs.len(), 5 * detections);
    for p in &pngs {
        let twin = second.join(p.file_name().unwrap());
        assert_eq!(fs::read(p).unwrap(), fs::read(twin).unwrap(), "{}", p.display());
    }

    // One noise-free SmoothGrad sample is plain guided backpropagation.
    let smooth = tmp.path().join("smooth");
    explain("sgbp", &smooth, &["--smooth-samples", "1", "--smooth-sigma", "0"]);
    for decision in ["class", "x_min", "y_min", "x_max", "y_max"] {
        let a = fs::read(first.join(format!("det00_gbp_{decision}.png"))).unwrap();
        let b = fs::read(smooth.join(format!("det00_sgbp_{decision}.png"))).unwrap();
        assert_eq!(a, b, "{decision}");
    }
}

#[test]
fn explain_without_detections_exits_with_three() {
    let tmp = TempDir::new().unwrap();
    let (data, checkpoint) = fixture(&tmp);
    let out = tmp.path().join("none");
    let result = run(&[
        "explain",
        "--checkpoint",
        s(&checkpoint),
        "--image",
        s(&data.join("scene_0001.png")),
        "--score-threshold",
        "0.99999",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&result), 3, "{}", String::from_utf8_lossy(&result.stderr));
    assert!(out.join("detections.json").exists());
    assert!(out.join("manifest.txt").exists());
}

#[test]
fn model_sanity_at_level_zero_is_perfectly_similar() {
    let tmp = TempDir::new().unwrap();
    let (data, checkpoint) = fixture(&tmp);
    let out = tmp.path().join("model");
    ok(&[
        "model-sanity",
        "--checkpoint",
        s(&checkpoint),
        "--dataset",
        s(&data),
        "--levels",
        "0",
        "--methods",
        "gbp,ig",
        "--decisions",
        "class,x_max",
        "--ig-steps",
        "8",
        "--score-threshold",
        LOW,
        "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(out.join("ssim.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let mean: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(mean, 1.0, "{row}");
    }
    let md = fs::read_to_string(out.join("scores.md")).unwrap();
    let body: Vec<&str> = md.lines().filter(|l| l.starts_with('|')).skip(2).collect();
    assert_eq!(body.len(), 2, "{md}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema"], "saliency-sanity/model-report/1");
    assert!(out.join("maps/scene_0000/level_000/gbp_class.png").exists());
}

#[test]
fn data_sanity_with_one_checkpoint_for_both_arms_fails() {
    let tmp = TempDir::new().unwrap();
    let (data, checkpoint) = fixture(&tmp);
    let out = tmp.path().join("data-sanity");
    ok(&[
        "data-sanity",
        "--true-checkpoint",
        s(&checkpoint),
        "--random-checkpoint",
        s(&checkpoint),
        "--dataset",
        s(&data),
        "--methods",
        "gbp",
        "--decisions",
        "class",
        "--score-threshold",
        LOW,
        "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(out.join("pairs.csv")).unwrap();
    let pairs: Vec<&str> = csv.lines().skip(1).collect();
    assert!(!pairs.is_empty());
    for p in pairs {
        let fields: Vec<&str> = p.split(',').collect();
        assert_eq!(fields[3].parse::<f64>().unwrap(), 1.0, "{p}");
        assert_eq!(fields[6], "false", "{p}");
    }
    let verdicts = fs::read_to_string(out.join("verdicts.md")).unwrap();
    assert!(verdicts.contains("fails data randomization"));
    assert!(!verdicts.contains("passes data randomization"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema"], "saliency-sanity/data-report/1");
    assert_eq!(report["true_fingerprint"], report["random_fingerprint"]);
    for key in ["pairs", "verdicts", "fraction_different", "threshold_not_met"] {
        assert!(report.get(key).is_some(), "{key}");
    }
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("run.conf");
    fs::write(&config, "# small set\ncount = 3\nseed = 11\n").unwrap();
    let from_file = tmp.path().join("file");
    ok(&["--config", s(&config), "generate", "--out", s(&from_file)]);
    assert_eq!(files(&from_file).len(), 2 * 3 + 1);

    let overridden = tmp.path().join("flag");
    ok(&["generate", "--config", s(&config), "--count", "2", "--out", s(&overridden)]);
    assert_eq!(files(&overridden).len(), 2 * 2 + 1);
    // The seed from the file still applies.
    let manifest = fs::read_to_string(overridden.join("manifest.txt")).unwrap();
    assert!(manifest.contains("generator.seed = 11"), "{manifest}");

    fs::write(&config, "colour = red\n").unwrap();
    assert_eq!(code(&run(&["--config", s(&config), "generate", "--out", s(&from_file)])), 1);
}
