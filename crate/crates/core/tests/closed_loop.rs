use std::path::Path;

use stereo_cbf::geometry::{Point3, RobotPose};
use stereo_cbf::scene::{render_triple, Obstacle, Scene, Shape, TextureSpec};
use stereo_cbf::sim::output::write_trajectory_csv;
use stereo_cbf::sim::pretrain::pretrain;
use stereo_cbf::sim::frames::save_frame;
use stereo_cbf::sim::{run_experiment, Mode, SimConfig, SimError};
use stereo_cbf::stereo::BlockMatcher;

fn sphere_config() -> SimConfig {
    SimConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/sphere.cfg")).unwrap()
}

fn short(mode: Mode, seconds: f64) -> SimConfig {
    let mut cfg = sphere_config();
    cfg.mode = mode;
    cfg.duration_s = seconds;
    cfg
}

fn csv_bytes(cfg: &SimConfig) -> Vec<u8> {
    let (log, _) = run_experiment(cfg, None).unwrap();
    let mut buf = Vec::new();
    write_trajectory_csv(&log, &mut buf).unwrap();
    buf
}

#[test]
fn log_has_one_record_per_control_step() {
    let cfg = short(Mode::Naive, 2.0);
    let (log, report) = run_experiment(&cfg, None).unwrap();
    assert_eq!(log.records.len(), cfg.control_steps());
    assert_eq!(report.steps, log.records.len());
    assert!(log.records.windows(2).all(|w| w[0].t < w[1].t));
    let min_h = log.records.iter().map(|r| r.h_ns_true).fold(f64::INFINITY, f64::min);
    assert_eq!(report.min_h_ns_true, min_h);
    assert_eq!(report.safety_violated, min_h < 0.0);
    assert!(log.records.iter().all(|r| r.u[0] <= cfg.v_des + 1e-12));
}

#[test]
fn identical_configs_give_identical_csv() {
    let cfg = short(Mode::RobustOracle, 1.5);
    assert_eq!(csv_bytes(&cfg), csv_bytes(&cfg));
}

#[test]
fn model_modes_require_a_model() {
    for mode in [Mode::RobustPretrained, Mode::RobustOnline] {
        assert!(matches!(run_experiment(&short(mode, 0.5), None), Err(SimError::MissingModel(m)) if m == mode));
    }
}

#[test]
fn oracle_sets_keep_the_robot_safe_and_it_settles() {
    let cfg = short(Mode::RobustOracle, 60.0);
    let (log, report) = run_experiment(&cfg, None).unwrap();
    for r in &log.records {
        assert!(r.h_ns_true >= -1e-6, "t = {}: h = {}", r.t, r.h_ns_true);
    }
    assert!(report.final_standoff <= cfg.barrier.c + 0.02, "standoff {}", report.final_standoff);
    assert!(report.steady_state_velocity.abs() <= 0.02, "v = {}", report.steady_state_velocity);
}

#[test]
fn exact_match_frames_pretrain_to_low_loss() {
    let cfg = sphere_config();
    let fb = cfg.rig.focal_baseline();
    let dir = tempfile::tempdir().unwrap();
    for (i, k) in [3.0, 4.0, 5.0].into_iter().enumerate() {
        // Whole view filled by a textured wall on the integer-disparity lattice.
        let depth = fb / (2.0 * k);
        let wall = Obstacle {
            shape: Shape::Plane { point: Point3::new(depth, 0.0, 0.0), normal: Point3::new(-1.0, 0.0, 0.0) },
            texture: TextureSpec::value_noise(0.01 * depth, i as u64 + 1, 0.8, 128.0),
        };
        let scene = Scene::new(vec![wall], 10.0, TextureSpec::flat(90.0)).unwrap();
        let (triple, _) = render_triple(&scene, &RobotPose::origin(), &cfg.rig);
        save_frame(dir.path(), &format!("wall{i}"), &triple).unwrap();
    }
    let model = dir.path().join("wall.model");
    let report = pretrain(dir.path(), &BlockMatcher::new(cfg.matching), 0.001, 500, &model).unwrap();
    assert!(report.final_loss <= 0.05, "final loss {}", report.final_loss);
    assert!(model.exists());
}
