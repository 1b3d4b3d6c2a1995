//! End-to-end command-line checks: the synth → train → eval → explain
//! pipeline on a tiny dataset, plus the exit-code contract.

use std::path::Path;
use std::process::Command;

fn isnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_isnet"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn isnet");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth_into(dir: &Path, bias: bool, seed: u64) -> String {
    let mut cmd = isnet();
    cmd.args(["synth", "--classes", "3", "--size", "32", "--per-class", "8", "--seed"])
        .arg(seed.to_string())
        .arg("--out")
        .arg(dir);
    if bias {
        cmd.arg("--bias");
    }
    run_ok(&mut cmd)
}

#[test]
fn full_pipeline_synth_train_eval_explain() {
    let root = tempfile::tempdir().unwrap();
    let biased_dir = root.path().join("biased");
    let clean_dir = root.path().join("clean");
    synth_into(&biased_dir, true, 7);
    synth_into(&clean_dir, false, 7);

    let ckpt = root.path().join("ckpt");
    run_ok(isnet()
        .args(["train", "--preset", "plain-small", "--p", "0.7", "--auto-e", "10", "--epochs", "2", "--seed", "1"])
        .arg("--data")
        .arg(&biased_dir)
        .arg("--out")
        .arg(&ckpt));
    assert!(ckpt.join("manifest.json").exists());
    let log = std::fs::read_to_string(ckpt.join("log.csv")).unwrap();
    assert!(log.starts_with("epoch,step,loss_c,loss_h,loss_is,grad_norm"));

    let report_path = root.path().join("report.json");
    run_ok(isnet()
        .args(["eval"])
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--data")
        .arg(&biased_dir)
        .arg("--clean-data")
        .arg(&clean_dir)
        .arg("--report")
        .arg(&report_path));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["compare"]["agreement"].is_number(), "report: {report}");
    assert!(report["metrics"]["macro_recall"].is_number() || report["metrics"]["macro_recall"].is_null());

    // Explain one test image for one class.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(biased_dir.join("manifest.json")).unwrap())
            .unwrap();
    let img = manifest["samples"][0]["image"].as_str().unwrap();
    let maps_dir = root.path().join("maps");
    let out = run_ok(isnet()
        .args(["explain", "--class", "1", "--pgm"])
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--input")
        .arg(biased_dir.join(img))
        .arg("--out")
        .arg(&maps_dir));
    assert!(out.contains("(1, 1, 1, 32, 32)"), "explain output: {out}");
    assert!(maps_dir.join("heatmaps.istn").exists());
    let pgm = std::fs::read(maps_dir.join("heatmap_class1.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(pgm.len(), "P5\n32 32\n255\n".len() + 32 * 32);
}

#[test]
fn synth_is_reproducible_by_digest() {
    let root = tempfile::tempdir().unwrap();
    let out1 = synth_into(&root.path().join("a"), true, 9);
    let out2 = synth_into(&root.path().join("b"), true, 9);
    let digest = |s: &str| s.lines().find(|l| l.starts_with("digest ")).unwrap().to_owned();
    assert_eq!(digest(&out1), digest(&out2));
    let out3 = synth_into(&root.path().join("c"), true, 10);
    assert_ne!(digest(&out1), digest(&out3));
}

#[test]
fn config_errors_exit_with_code_2() {
    let root = tempfile::tempdir().unwrap();
    let out = isnet()
        .args(["synth", "--classes", "3", "--size", "32", "--per-class", "0"])
        .arg("--out")
        .arg(root.path().join("d"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // Unknown preset is a config error too.
    let out = isnet()
        .args(["train", "--preset", "nope", "--data"])
        .arg(root.path().join("missing"))
        .arg("--out")
        .arg(root.path().join("ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_precision_env_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    let out = isnet()
        .env("ISNET_PRECISION", "f16")
        .args(["synth", "--per-class", "2"])
        .arg("--out")
        .arg(root.path().join("d"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn f64_precision_mode_works_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("data");
    let out = isnet()
        .env("ISNET_PRECISION", "f64")
        .args(["synth", "--classes", "2", "--size", "32", "--per-class", "8", "--seed", "3"])
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    // The stored tensors carry the f64 dtype tag.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let img = manifest["samples"][0]["image"].as_str().unwrap();
    let bytes = std::fs::read(dir.join(img)).unwrap();
    assert_eq!(&bytes[..4], b"ISTN");
    assert_eq!(bytes[5], 1, "dtype tag f64");
}

#[test]
fn help_lists_spec_defaults() {
    let out = isnet().args(["synth", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["--classes", "--size", "--per-class", "--bias", "--multi-label", "--seed", "--out"] {
        assert!(text.contains(needle), "synth help misses {needle}:\n{text}");
    }
    assert!(text.contains("default: 3") && text.contains("default: 32") && text.contains("default: 200"));

    let out = isnet().args(["train", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["--data", "--preset", "--p", "--e", "--auto-e", "--epochs", "--seed", "--out", "--config"] {
        assert!(text.contains(needle), "train help misses {needle}:\n{text}");
    }

    let out = isnet().args(["eval", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["--ckpt", "--data", "--clean-data", "--report"] {
        assert!(text.contains(needle), "eval help misses {needle}:\n{text}");
    }

    let out = isnet().args(["explain", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["--ckpt", "--input", "--class", "--pgm", "--out"] {
        assert!(text.contains(needle), "explain help misses {needle}:\n{text}");
    }
}
