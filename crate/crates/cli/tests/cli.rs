//! Exercises the installed binary end to end: synth -> reconstruct ->
//! evaluate -> register, plus the failure contract.

use std::path::Path;
use std::process::Command;

fn chromafuse() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chromafuse"))
}

#[test]
fn synth_reconstruct_evaluate_register_flow() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("bundle");
    let out = dir.path().join("out");

    let status = chromafuse()
        .args(["synth", "--out"])
        .arg(&bundle)
        .args(["--keyframes", "2", "--seed", "9", "--image-size", "256", "--focal", "320"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(bundle.join("poses.txt").exists());
    assert!(bundle.join("intrinsics.json").exists());
    assert!(bundle.join("gt").join("mixing.json").exists());

    let status = chromafuse()
        .args(["reconstruct", "--bundle"])
        .arg(&bundle)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "1"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("cloud_000000.ply").exists());
    assert!(out.join("global.ply").exists());
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["error"].is_null());
    assert_eq!(metrics["keyframes"].as_array().unwrap().len(), 2);

    // Evaluate a cloud against the ground-truth-derived cloud (self check:
    // compare the global cloud against keyframe 0's cloud).
    let eval_out = dir.path().join("eval.json");
    let status = chromafuse()
        .args(["evaluate", "--cloud"])
        .arg(out.join("cloud_000000.ply"))
        .arg("--gt-cloud")
        .arg(out.join("global.ply"))
        .arg("--out")
        .arg(&eval_out)
        .status()
        .unwrap();
    assert!(status.success());
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&eval_out).unwrap()).unwrap();
    assert!(eval["cloud"]["position_rmse"].as_f64().unwrap() >= 0.0);

    // Standalone registration of a cloud onto itself.
    let reg_out = dir.path().join("reg.json");
    let status = chromafuse()
        .args(["register", "--source"])
        .arg(out.join("cloud_000000.ply"))
        .arg("--target")
        .arg(out.join("cloud_000000.ply"))
        .arg("--out")
        .arg(&reg_out)
        .status()
        .unwrap();
    assert!(status.success());
    let reg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&reg_out).unwrap()).unwrap();
    assert_eq!(reg["fitness"].as_f64().unwrap(), 1.0);
    assert!(reg["rotation_angle_deg"].as_f64().unwrap() < 1e-6);
}

#[test]
fn evaluate_normal_maps_against_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("bundle");
    let status = chromafuse()
        .args(["synth", "--out"])
        .arg(&bundle)
        .args(["--keyframes", "1", "--image-size", "128", "--focal", "160"])
        .status()
        .unwrap();
    assert!(status.success());

    // Ground truth against itself: zero error.
    let gt = bundle.join("gt").join("normals_000000.pfm");
    let output = chromafuse()
        .args(["evaluate", "--normals"])
        .arg(&gt)
        .arg("--gt-normals")
        .arg(&gt)
        .output()
        .unwrap();
    assert!(output.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&output.stdout)).unwrap();
    assert!(report["normals"]["median_deg"].as_f64().unwrap() < 1e-6);
}

#[test]
fn reconstruct_failure_writes_error_record_and_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = dir.path().join("out");
    let status = chromafuse()
        .args(["reconstruct", "--bundle"])
        .arg(&empty)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(!status.success());
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["error"].as_str().unwrap().contains("poses.txt"));
    assert!(!Path::new(&out.join("global.ply")).exists());
}

#[test]
fn rejects_unknown_scene() {
    let dir = tempfile::tempdir().unwrap();
    let output = chromafuse()
        .args(["synth", "--out"])
        .arg(dir.path().join("b"))
        .args(["--scene", "torus"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("unknown scene"));
}
