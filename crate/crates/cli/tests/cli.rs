use std::path::{Path, PathBuf};
use std::process::Command;

fn stereo_cbf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stereo-cbf"))
}

fn sphere_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/sphere.cfg")
}

fn short_config(dir: &Path, seconds: f64) -> PathBuf {
    let text = std::fs::read_to_string(sphere_cfg()).unwrap().replace("duration_s = 60", &format!("duration_s = {seconds}"));
    let path = dir.join("short.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn simulate_writes_csv_report_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), 1.0);
    let out = dir.path().join("out");
    let run = stereo_cbf()
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--mode", "naive", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&run.stdout).contains("mode = naive"));
    let csv = std::fs::read_to_string(out.join("naive/trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("t,x,y,theta,v_des,omega_des,v,omega,h_ns_true,h_ns_meas,eps_min,eps_mean,eps_max,loss,n_active")
    );
    assert_eq!(lines.count(), 10);
    assert!(out.join("naive/report.txt").exists());
    assert!(out.join("naive/velocity.png").exists());
    assert!(out.join("overlay.png").exists());
}

#[test]
fn config_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "focal_length_px = -5\n").unwrap();
    let out = stereo_cbf()
        .args(["simulate", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.cfg"));

    let missing_model = stereo_cbf()
        .args(["simulate", "--config", sphere_cfg().to_str().unwrap(), "--mode", "robust-online", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(missing_model.status.code(), Some(3));
}

#[test]
fn check_theorem_succeeds_and_reports_control() {
    let out = stereo_cbf().args(["check-theorem", "--trials", "500", "--seed", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("violations = 0"));
    assert!(!text.contains("negative_control_violations = 0"));
}

#[test]
fn pretrain_rejects_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = stereo_cbf()
        .args(["pretrain", "--frames", dir.path().to_str().unwrap(), "--out"])
        .arg(dir.path().join("m.model"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_stereo_reports_exact_reconstruction() {
    let out = stereo_cbf()
        .args(["eval-stereo", "--config", sphere_cfg().to_str().unwrap(), "--scenes", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("reconstruction_exact_fraction = 1\n"), "{text}");
    assert!(text.contains("empirical_error_frequencies = "));
}
