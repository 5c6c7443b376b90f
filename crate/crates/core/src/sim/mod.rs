//! Closed-loop experiments: render, match, adapt, filter, integrate.

pub mod config;
pub mod frames;
pub mod output;
pub mod pretrain;

use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::step_unicycle;
use crate::error_model::{
    adapt_on_observation, quantile, uncertainty_set, ErrorModelError, ErrorModelParams, FrameFeatures,
    StereoObservation, DEFAULT_CLASSES,
};
use crate::geometry::{pixel_position, Disparity, PixelCoord, RobotPose};
use crate::image::GrayImage;
use crate::safety::{barrier, naive_controller, robust_controller, FilterResult, PixelMeasurement, SafetyError};
use crate::scene::{corrupt_disparity, render_triple, CorruptionSpec, GroundTruth, ImageTriple, Scene};
use crate::stereo::{BlockMatcher, CameraPair, DisparityMap, Matcher, StereoError};

pub use config::{ConfigError, Mode, SimConfig};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("mode {0} requires a pretrained model")]
    MissingModel(Mode),
    #[error(transparent)]
    Stereo(#[from] StereoError),
    #[error(transparent)]
    Model(#[from] ErrorModelError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Wraps a matcher and applies scripted corruption to the wide-baseline pair only.
#[derive(Debug, Clone)]
pub struct CorruptingMatcher<M> {
    pub inner: M,
    pub corruption: Option<CorruptionSpec>,
}

impl<M: Matcher> Matcher for CorruptingMatcher<M> {
    fn disparity(&self, pair: CameraPair, left: &GrayImage, right: &GrayImage) -> Result<DisparityMap, StereoError> {
        let d = self.inner.disparity(pair, left, right)?;
        Ok(match (&self.corruption, pair) {
            (Some(spec), CameraPair::LeftRight) => corrupt_disparity(&d, spec),
            _ => d,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub pose: RobotPose<f64>,
    pub u_des: [f64; 2],
    pub u: [f64; 2],
    pub h_ns_true: f64,
    pub h_ns_meas: f64,
    pub eps_min: f64,
    pub eps_mean: f64,
    pub eps_max: f64,
    pub loss: Option<f64>,
    pub n_active: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub mode: Mode,
    pub records: Vec<StepRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub steps: usize,
    pub min_h_ns_true: f64,
    pub final_h_ns_true: f64,
    /// Planar distance from the final pose to the nearest obstacle surface.
    pub final_standoff: f64,
    pub safety_violated: bool,
    /// Mean filtered forward speed over the final second.
    pub steady_state_velocity: f64,
    pub infeasible_steps: usize,
}

impl ExperimentReport {
    /// Whether the run broke the guarantee its mode advertises. Online
    /// adaptation only promises shallow transient dips that recover by the end.
    pub fn breaks_promise(&self) -> bool {
        match self.mode {
            Mode::Naive => false,
            Mode::RobustOnline => self.min_h_ns_true < -ONLINE_DIP_TOLERANCE || self.final_h_ns_true < 0.0,
            Mode::RobustPretrained | Mode::RobustOracle => self.safety_violated,
        }
    }
}

/// Deepest transient barrier dip tolerated in online mode.
pub const ONLINE_DIP_TOLERANCE: f64 = 0.01;

/// Facing `+x`, at `start_distance` from obstacle 0 along the line through its centre.
pub fn start_pose(cfg: &SimConfig) -> RobotPose<f64> {
    let shape = &cfg.scene.obstacles()[0].shape;
    let anchor = match shape {
        crate::scene::Shape::Sphere { center, .. } => *center,
        crate::scene::Shape::Plane { point, .. } => *point,
        crate::scene::Shape::Panel { center, .. } => *center,
    };
    let clearance = |t: f64| shape.planar_clearance(anchor.x - t, anchor.y);
    let (mut lo, mut hi) = (0.0, 1.0);
    while clearance(hi) < cfg.start_distance && hi < 1e6 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if clearance(mid) < cfg.start_distance {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    RobotPose::new(anchor.x - hi, anchor.y, 0.0)
}

/// Smallest barrier value over ground-truth obstacle points seen by `I1`.
pub fn true_h_ns(gt: &GroundTruth, pose: &RobotPose<f64>, c: f64) -> f64 {
    gt.points.iter().flatten().map(|p| barrier(pose, p, c)).fold(f64::INFINITY, f64::min)
}

fn planar_standoff(scene: &Scene, pose: &RobotPose<f64>) -> f64 {
    scene.obstacles().iter().map(|o| o.shape.planar_clearance(pose.x, pose.y)).fold(f64::INFINITY, f64::min)
}

/// Per-pixel error bound used by a robust mode.
enum Bounds<'a> {
    Exact,
    Model { params: &'a ErrorModelParams<f64>, features: FrameFeatures<'a> },
    Oracle(&'a GroundTruth),
}

fn build_measurements(
    cfg: &SimConfig,
    pose: &RobotPose<f64>,
    d13: &DisparityMap,
    bounds: &Bounds<'_>,
) -> Result<Vec<PixelMeasurement<f64>>, SimError> {
    let rig = &cfg.rig;
    let (w, h) = d13.dims();
    let fb = rig.focal_baseline();
    let sigma = cfg.barrier.sigma;
    let per_pixel = |i: usize| -> Result<Option<PixelMeasurement<f64>>, SimError> {
        let (u, v) = (i % w, i / w);
        let Some(d) = d13.get(u, v).filter(|&d| d >= 1) else { return Ok(None) };
        let p = PixelCoord::new(u, v);
        let rho_hat = pixel_position(pose, rig, p, d).map_err(ErrorModelError::from)?;
        let q: Option<Disparity> = match bounds {
            Bounds::Exact => None,
            Bounds::Model { params, features } => {
                let mut probs = [0.0; DEFAULT_CLASSES];
                let x = features.at::<f64>(p);
                if params.classes() == DEFAULT_CLASSES {
                    params.predict_into(&x, &mut probs);
                    Some(quantile(&probs, sigma, rig.d_max()))
                } else {
                    Some(quantile(params.predict(&x).probs(), sigma, rig.d_max()))
                }
            }
            Bounds::Oracle(gt) => Some(match (gt.points[i], gt.d13.get(u, v)) {
                (Some(_), Some(d_gt)) => d.abs_diff(d_gt) + 1,
                _ => 1,
            }),
        };
        let set = q.map(|q| uncertainty_set(rig, pose, p, d, q)).transpose()?;
        Ok(Some(PixelMeasurement { pixel: p, rho_hat, z: fb / f64::from(d), set }))
    };
    let all: Vec<Option<PixelMeasurement<f64>>> =
        (0..w * h).into_par_iter().map(per_pixel).collect::<Result<_, _>>()?;
    Ok(all.into_iter().flatten().collect())
}

fn eps_stats(filter: &FilterResult<f64>) -> (f64, f64, f64) {
    if filter.constraints.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for r in &filter.constraints {
        lo = lo.min(r.epsilon);
        hi = hi.max(r.epsilon);
        sum += r.epsilon;
    }
    (lo, sum / filter.constraints.len() as f64, hi)
}

/// Runs one closed-loop experiment. Deterministic for a given configuration and model.
pub fn run_experiment(
    cfg: &SimConfig,
    model: Option<&ErrorModelParams<f64>>,
) -> Result<(TrajectoryLog, ExperimentReport), SimError> {
    let mode = cfg.mode;
    if mode.needs_model() && model.is_none() {
        return Err(SimError::MissingModel(mode));
    }
    let matcher = CorruptingMatcher { inner: BlockMatcher::new(cfg.matching), corruption: cfg.corruption };
    let mut params = model.cloned().unwrap_or_default();
    let mut pose = start_pose(cfg);
    let u_des = [cfg.v_des, cfg.omega_des];
    let substeps = cfg.substeps();
    let period = 1.0 / cfg.control_rate_hz;
    let mut records = Vec::with_capacity(cfg.control_steps());
    let mut infeasible_steps = 0;

    for k in 0..cfg.control_steps() {
        let t = k as f64 * period;
        let (triple, gt): (ImageTriple, GroundTruth) = render_triple(&cfg.scene, &pose, &cfg.rig);
        let obs = StereoObservation::compute(&triple, &matcher)?;
        let mut loss = None;
        if mode == Mode::RobustOnline {
            let (next, l) = adapt_on_observation(&params, &triple, &obs, cfg.eta)?;
            params = next;
            loss = l;
        }
        let bounds = match mode {
            Mode::Naive => Bounds::Exact,
            Mode::RobustPretrained | Mode::RobustOnline => Bounds::Model {
                params: &params,
                features: FrameFeatures::new(&triple.left, &triple.right, &obs.d13)?,
            },
            Mode::RobustOracle => Bounds::Oracle(&gt),
        };
        let pixels = build_measurements(cfg, &pose, &obs.d13, &bounds)?;
        let filtered = match mode {
            _ if pixels.is_empty() => None,
            Mode::Naive => Some(naive_controller(u_des, &pose, &pixels, &cfg.barrier)?),
            _ => Some(robust_controller(u_des, &pose, &pixels, &cfg.barrier)?),
        };
        let (u, h_ns_meas, eps, n_active) = match &filtered {
            Some(f) => {
                if !f.feasible {
                    infeasible_steps += 1;
                }
                (f.u, f.h_ns_measured, eps_stats(f), f.active_pixels.len())
            }
            None => (u_des, f64::INFINITY, (0.0, 0.0, 0.0), 0),
        };
        records.push(StepRecord {
            t,
            pose,
            u_des,
            u,
            h_ns_true: true_h_ns(&gt, &pose, cfg.barrier.c),
            h_ns_meas,
            eps_min: eps.0,
            eps_mean: eps.1,
            eps_max: eps.2,
            loss,
            n_active,
        });
        for _ in 0..substeps {
            pose = step_unicycle(&pose, u, cfg.dt_dynamics);
        }
    }

    let log = TrajectoryLog { mode, records };
    let report = summarize(&log, cfg, &pose, infeasible_steps);
    Ok((log, report))
}

fn summarize(log: &TrajectoryLog, cfg: &SimConfig, final_pose: &RobotPose<f64>, infeasible_steps: usize) -> ExperimentReport {
    let min_h = log.records.iter().map(|r| r.h_ns_true).fold(f64::INFINITY, f64::min);
    let final_h = log.records.last().map_or(f64::INFINITY, |r| r.h_ns_true);
    let last_second = (cfg.control_rate_hz.round() as usize).clamp(1, log.records.len().max(1));
    let tail = &log.records[log.records.len().saturating_sub(last_second)..];
    let steady = if tail.is_empty() { 0.0 } else { tail.iter().map(|r| r.u[0]).sum::<f64>() / tail.len() as f64 };
    ExperimentReport {
        mode: log.mode,
        steps: log.records.len(),
        min_h_ns_true: min_h,
        final_h_ns_true: final_h,
        final_standoff: planar_standoff(&cfg.scene, final_pose),
        safety_violated: min_h < 0.0,
        steady_state_velocity: steady,
        infeasible_steps,
    }
}
