//! Barrier functions over pixelized obstacle points, index-set pruning, and
//! the naive and measurement-robust velocity filters.

use std::io::{self, Write};

use thiserror::Error;

use crate::error_model::{epsilon_bound, worst_case_disparity, UncertaintySet};
use crate::geometry::{PixelCoord, Point3, RobotPose};
use crate::qp::{cbf_qp, HalfPlane, QpSolution};
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum SafetyError {
    #[error("no pixel available to build constraints")]
    EmptyPixelSet,
    #[error("invalid barrier configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
}

/// Lipschitz constants of `L_f h`, `gamma o h_ns` and `L_g h` with respect
/// to obstacle-point position.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LipschitzConstants<T> {
    pub l_lfh: T,
    pub l_gamma_hns: T,
    pub l_lgh: T,
}

impl<T: Real> LipschitzConstants<T> {
    pub fn zero() -> Self {
        Self { l_lfh: T::zero(), l_gamma_hns: T::zero(), l_lgh: T::zero() }
    }

    pub fn scaled(&self, k: T) -> Self {
        Self { l_lfh: self.l_lfh * k, l_gamma_hns: self.l_gamma_hns * k, l_lgh: self.l_lgh * k }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierConfig<T> {
    /// Safe planar radius around each obstacle point.
    pub c: T,
    /// Slope of the linear class-K function `gamma(r) = alpha * r`.
    pub alpha: T,
    pub delta: T,
    pub max_constraints: usize,
    pub sigma: T,
    /// Upper bound on `|u|` used to linearize the robust tightening.
    pub u_max: T,
    pub lipschitz: LipschitzConstants<T>,
}

impl<T: Real> Default for BarrierConfig<T> {
    fn default() -> Self {
        Self {
            c: T::lit(0.33),
            alpha: T::one(),
            delta: T::zero(),
            max_constraints: 4000,
            sigma: T::lit(0.99),
            u_max: T::one(),
            lipschitz: LipschitzConstants::zero(),
        }
    }
}

impl<T: Real> BarrierConfig<T> {
    pub fn validate(&self) -> Result<(), SafetyError> {
        let bad = |m: &str| Err(SafetyError::InvalidConfig(m.into()));
        if !(self.c > T::zero()) {
            return bad("c must be positive");
        }
        if !(self.alpha > T::zero()) {
            return bad("alpha must be positive");
        }
        if !(self.delta >= T::zero()) {
            return bad("delta must be nonnegative");
        }
        if self.max_constraints == 0 {
            return bad("max_constraints must be positive");
        }
        if !(self.sigma > T::zero() && self.sigma <= T::one()) {
            return bad("sigma must lie in (0, 1]");
        }
        if !(self.u_max > T::zero()) {
            return bad("u_max must be positive");
        }
        let l = &self.lipschitz;
        if !(l.l_lfh >= T::zero() && l.l_gamma_hns >= T::zero() && l.l_lgh >= T::zero()) {
            return bad("Lipschitz constants must be nonnegative");
        }
        Ok(())
    }

    pub fn gamma(&self, r: T) -> T {
        self.alpha * r
    }
}

pub fn barrier<T: Real>(pose: &RobotPose<T>, rho: &Point3<T>, c: T) -> T {
    let dx = pose.x - rho.x;
    let dy = pose.y - rho.y;
    T::half() * (dx * dx + dy * dy - c * c)
}

/// `L_g h` for the unicycle; the angular column is identically zero.
pub fn lie_g<T: Real>(pose: &RobotPose<T>, rho: &Point3<T>) -> [T; 2] {
    let (cos, sin) = pose.heading();
    [(pose.x - rho.x) * cos + (pose.y - rho.y) * sin, T::zero()]
}

/// `d/dt h` along `u`; the drift term vanishes for the unicycle.
pub fn h_dot<T: Real>(pose: &RobotPose<T>, rho: &Point3<T>, u: [T; 2]) -> T {
    let g = lie_g(pose, rho);
    g[0] * u[0] + g[1] * u[1]
}

pub fn h_ns<T: Real>(values: &[T]) -> Result<T, SafetyError> {
    values.iter().copied().reduce(T::min).ok_or(SafetyError::EmptyPixelSet)
}

fn smallest_first<T: Real>(mut idx: Vec<usize>, key: &[T], max: usize) -> Vec<usize> {
    idx.sort_by(|&a, &b| key[a].partial_cmp(&key[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(max);
    idx
}

/// Indices with `h <= min h + delta`, ordered by increasing `h` and truncated to `max`.
pub fn index_set<T: Real>(h: &[T], delta: T, max: usize) -> Vec<usize> {
    let Ok(m) = h_ns(h) else { return Vec::new() };
    let idx = (0..h.len()).filter(|&i| h[i] <= m + delta).collect();
    smallest_first(idx, h, max)
}

/// Indices with `min_E h <= min_q max_E h + delta`, ordered by increasing
/// `min_E h` and truncated to `max`.
pub fn robust_index_set<T: Real>(h_min: &[T], h_max: &[T], delta: T, max: usize) -> Vec<usize> {
    assert_eq!(h_min.len(), h_max.len());
    let Ok(m) = h_ns(h_max) else { return Vec::new() };
    let idx = (0..h_min.len()).filter(|&i| h_min[i] <= m + delta).collect();
    smallest_first(idx, h_min, max)
}

/// Extremes of the barrier over every member of an uncertainty set.
pub fn barrier_range<T: Real>(pose: &RobotPose<T>, set: &UncertaintySet<T>, c: T) -> (T, T) {
    set.members().fold((T::infinity(), T::neg_infinity()), |(lo, hi), (_, rho)| {
        let h = barrier(pose, &rho, c);
        (lo.min(h), hi.max(h))
    })
}

/// Measurement-robust CBF constraint for one pixel:
/// `L_f h + L_g h u - (L1 + L2 + L3 u_max) eps >= -gamma(h_ns)`.
pub fn mr_cbf_constraint<T: Real>(
    pose: &RobotPose<T>,
    rho_hat: &Point3<T>,
    eps: T,
    cfg: &BarrierConfig<T>,
    h_ns_val: T,
) -> HalfPlane<T> {
    let l = &cfg.lipschitz;
    let margin = (l.l_lfh + l.l_gamma_hns + l.l_lgh * cfg.u_max) * eps;
    HalfPlane::new(lie_g(pose, rho_hat), margin - cfg.gamma(h_ns_val))
}

/// A pixel's measured obstacle point.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMeasurement<T> {
    pub pixel: PixelCoord,
    pub rho_hat: Point3<T>,
    /// Forward range of the pixel's ray at the measured disparity, `> 0`.
    pub z: T,
    pub set: Option<UncertaintySet<T>>,
}

/// One constraint row of a filter solve, for logging and CSV dumps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelConstraint<T> {
    pub pixel: PixelCoord,
    pub h: T,
    pub z: T,
    pub epsilon: T,
    /// Upper bound on `v` implied by this row.
    pub bound: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult<T> {
    pub u: [T; 2],
    pub feasible: bool,
    /// Indices into the measurement list of the constrained pixels.
    pub active_pixels: Vec<usize>,
    pub h_ns_measured: T,
    /// Tightest velocity bound among the constraints.
    pub binding_bound: T,
    pub constraints: Vec<PixelConstraint<T>>,
    pub qp: QpSolution<T>,
}

fn solve_velocity_bounds<T: Real>(
    u_des: [T; 2],
    active: Vec<usize>,
    rows: Vec<PixelConstraint<T>>,
    gamma_h: T,
    h_ns_measured: T,
) -> FilterResult<T> {
    let cons: Vec<HalfPlane<T>> = rows
        .iter()
        .map(|r| HalfPlane::new([-r.z, T::zero()], -gamma_h))
        .collect();
    let qp = cbf_qp(u_des, &cons);
    let binding_bound = rows.iter().map(|r| r.bound).fold(T::infinity(), T::min);
    FilterResult { u: qp.u, feasible: qp.feasible, active_pixels: active, h_ns_measured, binding_bound, constraints: rows, qp }
}

/// Filter built directly on measured positions: `-z_p v >= -gamma(min h(rho_hat))` for `p` in `Lambda`.
pub fn naive_controller<T: Real>(
    u_des: [T; 2],
    pose: &RobotPose<T>,
    pixels: &[PixelMeasurement<T>],
    cfg: &BarrierConfig<T>,
) -> Result<FilterResult<T>, SafetyError> {
    let h: Vec<T> = pixels.iter().map(|m| barrier(pose, &m.rho_hat, cfg.c)).collect();
    let h_min = h_ns(&h)?;
    let active = index_set(&h, cfg.delta, cfg.max_constraints);
    let g = cfg.gamma(h_min);
    let rows = active
        .iter()
        .map(|&i| PixelConstraint { pixel: pixels[i].pixel, h: h[i], z: pixels[i].z, epsilon: T::zero(), bound: g / pixels[i].z })
        .collect();
    Ok(solve_velocity_bounds(u_des, active, rows, g, h_min))
}

/// Filter built on worst-case points of each uncertainty set:
/// `v <= gamma(min h(rho*)) / z*_p` for `p` in the robust index set.
/// Pixels without a set are treated as exactly measured.
pub fn robust_controller<T: Real>(
    u_des: [T; 2],
    pose: &RobotPose<T>,
    pixels: &[PixelMeasurement<T>],
    cfg: &BarrierConfig<T>,
) -> Result<FilterResult<T>, SafetyError> {
    if pixels.is_empty() {
        return Err(SafetyError::EmptyPixelSet);
    }
    let n = pixels.len();
    let mut h_min = Vec::with_capacity(n);
    let mut h_max = Vec::with_capacity(n);
    let mut worst: Vec<(T, T, T)> = Vec::with_capacity(n);
    for m in pixels {
        match &m.set {
            Some(set) => {
                let (lo, hi) = barrier_range(pose, set, cfg.c);
                h_min.push(lo);
                h_max.push(hi);
                let (d_star, rho_star) = worst_case_disparity(set);
                // Forward range scales as 1/d along a pixel ray.
                let z_star = if d_star == set.d_hat {
                    m.z
                } else {
                    m.z * T::lit(f64::from(set.d_hat)) / T::lit(f64::from(d_star))
                };
                worst.push((barrier(pose, &rho_star, cfg.c), z_star, epsilon_bound(set)));
            }
            None => {
                let h = barrier(pose, &m.rho_hat, cfg.c);
                h_min.push(h);
                h_max.push(h);
                worst.push((h, m.z, T::zero()));
            }
        }
    }
    let h_star_min = worst.iter().map(|w| w.0).fold(T::infinity(), T::min);
    let h_meas = pixels.iter().map(|m| barrier(pose, &m.rho_hat, cfg.c)).fold(T::infinity(), T::min);
    let active = robust_index_set(&h_min, &h_max, cfg.delta, cfg.max_constraints);
    let g = cfg.gamma(h_star_min);
    let rows = active
        .iter()
        .map(|&i| {
            let (h, z, eps) = worst[i];
            PixelConstraint { pixel: pixels[i].pixel, h, z, epsilon: eps, bound: g / z }
        })
        .collect();
    Ok(solve_velocity_bounds(u_des, active, rows, g, h_meas))
}

/// Writes constraint rows as `pixel,h,z,epsilon,bound` with `pixel` as `u:v`.
pub fn write_constraints_csv<T: Real, W: Write>(rows: &[PixelConstraint<T>], mut w: W) -> io::Result<()> {
    writeln!(w, "pixel,h,z,epsilon,bound")?;
    for r in rows {
        writeln!(w, "{}:{},{},{},{},{}", r.pixel.u, r.pixel.v, r.h, r.z, r.epsilon, r.bound)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error_model::uncertainty_set;
    use crate::geometry::{pixel_position, CameraRig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rig() -> CameraRig<f64> {
        CameraRig::new(100.0, 0.12, (80.0, 60.0), 160, 120, 48).unwrap()
    }

    fn measure(pose: &RobotPose<f64>, u: usize, v: usize, d: u16, q: Option<u16>) -> PixelMeasurement<f64> {
        let p = PixelCoord::new(u, v);
        let rig = rig();
        PixelMeasurement {
            pixel: p,
            rho_hat: pixel_position(pose, &rig, p, d).unwrap(),
            z: rig.focal_baseline() / f64::from(d),
            set: q.map(|q| uncertainty_set(&rig, pose, p, d, q).unwrap()),
        }
    }

    #[test]
    fn barrier_examples() {
        let o = RobotPose::origin();
        assert_abs_diff_eq!(barrier(&o, &Point3::new(1.0, 0.0, 0.0), 0.33), 0.44555, epsilon = 1e-12);
        assert_abs_diff_eq!(barrier(&o, &Point3::new(0.0, 0.33, 0.7), 0.33), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(barrier(&o, &Point3::new(0.0, 0.0, 0.2), 0.33), -0.5 * 0.33 * 0.33, epsilon = 1e-15);
    }

    #[test]
    fn h_ns_examples() {
        assert_eq!(h_ns(&[0.7]), Ok(0.7));
        assert_eq!(h_ns(&[0.5, 0.2, 0.9]), Ok(0.2));
        assert_eq!(h_ns(&[0.4, 0.4]), Ok(0.4));
        assert_eq!(h_ns::<f64>(&[]), Err(SafetyError::EmptyPixelSet));
    }

    #[test]
    fn index_set_examples() {
        assert_eq!(index_set(&[0.3, 0.3, 0.3], 0.0, 10), vec![0, 1, 2]);
        assert_eq!(index_set(&[0.1, 0.2, 0.3], 0.05, 10), vec![0]);
        assert_eq!(index_set(&[0.1, 0.2, 0.3], 0.15, 10), vec![0, 1]);
        assert_eq!(index_set(&[0.3, 0.1, 0.2], 1.0, 2), vec![1, 2]);
    }

    #[test]
    fn robust_index_set_examples() {
        let h = [0.4, 0.1, 0.25];
        assert_eq!(robust_index_set(&h, &h, 0.1, 10), index_set(&h, 0.1, 10));
        // The second pixel's set is wide: its lower barrier value drops below the first's upper one.
        assert_eq!(robust_index_set(&[0.5, 0.9], &[0.5, 0.9], 0.0, 10), vec![0]);
        assert_eq!(robust_index_set(&[0.5, 0.45], &[0.5, 3.0], 0.0, 10), vec![1, 0]);
    }

    #[test]
    fn mr_constraint_examples() {
        let pose = RobotPose::new(0.0, 0.0, 0.0);
        let rho = Point3::new(1.2, 0.1, 0.0);
        let mut cfg = BarrierConfig::<f64>::default();
        let nominal = mr_cbf_constraint(&pose, &rho, 0.0, &cfg, 0.3);
        assert_eq!(nominal, HalfPlane::new([-1.2, 0.0], -0.3));
        assert_eq!(mr_cbf_constraint(&pose, &rho, 0.5, &cfg, 0.3), nominal);
        cfg.lipschitz = LipschitzConstants { l_lfh: 0.0, l_gamma_hns: 2.0, l_lgh: 1.0 };
        let one = mr_cbf_constraint(&pose, &rho, 0.1, &cfg, 0.3);
        let two = mr_cbf_constraint(&pose, &rho, 0.2, &cfg, 0.3);
        assert_abs_diff_eq!(two.b - nominal.b, 2.0 * (one.b - nominal.b), epsilon = 1e-15);
        assert_abs_diff_eq!(one.b - nominal.b, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn naive_far_obstacle_keeps_desired_speed() {
        let pose = RobotPose::origin();
        let px: Vec<_> = (70..90).map(|u| measure(&pose, u, 60, 4, None)).collect();
        let r = naive_controller([0.2, 0.0], &pose, &px, &BarrierConfig::default()).unwrap();
        assert!(r.feasible);
        assert_abs_diff_eq!(r.u[0], 0.2, epsilon = 1e-15);
        assert!(naive_controller::<f64>([0.2, 0.0], &pose, &[], &BarrierConfig::default()).is_err());
    }

    #[test]
    fn boundary_forces_stop() {
        let rig = rig();
        let pose = RobotPose::origin();
        let m = measure(&pose, 80, 60, 12, None);
        let cfg = BarrierConfig { c: m.rho_hat.x, ..BarrierConfig::default() };
        let r = naive_controller([0.2, 0.1], &pose, std::slice::from_ref(&m), &cfg).unwrap();
        assert!(r.u[0] <= 1e-15);
        assert_abs_diff_eq!(r.u[1], 0.1, epsilon = 1e-15);
        // Worst-case point on the boundary.
        let with_set = measure(&pose, 80, 60, 10, Some(2));
        let cfg = BarrierConfig { c: rig.focal_baseline() / 12.0, ..BarrierConfig::default() };
        let r = robust_controller([0.2, 0.0], &pose, &[with_set], &cfg).unwrap();
        assert!(r.u[0] <= 1e-12);
    }

    #[test]
    fn wider_sets_slow_down() {
        let pose = RobotPose::origin();
        let cfg = BarrierConfig::default();
        let mut last = f64::INFINITY;
        for q in [0, 1, 3, 6] {
            let px: Vec<_> = (60..100).map(|u| measure(&pose, u, 60, 18, Some(q))).collect();
            let v = robust_controller([0.2, 0.0], &pose, &px, &cfg).unwrap().u[0];
            assert!(v <= last + 1e-15, "q={q}: {v} > {last}");
            last = v;
        }
        assert!(last < 0.2);
    }

    #[test]
    fn constraint_csv() {
        let rows = [PixelConstraint { pixel: PixelCoord::new(3, 4), h: 0.5, z: 1.0, epsilon: 0.0, bound: 0.5 }];
        let mut buf = Vec::new();
        write_constraints_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "pixel,h,z,epsilon,bound\n3:4,0.5,1,0,0.5\n");
    }

    type Instance = (RobotPose<f64>, Vec<(usize, usize, u16, u16)>);

    fn instance() -> impl Strategy<Value = Instance> {
        (
            (-1.0f64..1.0, -1.0f64..1.0, -3.0f64..3.0),
            prop::collection::vec((0usize..160, 0usize..120, 1u16..=48, 0u16..6), 1..40),
        )
            .prop_map(|((x, y, t), px)| (RobotPose::new(x, y, t), px))
    }

    proptest! {
        #[test]
        fn lambda_contained_in_robust_lambda((pose, px) in instance(), delta in 0.0f64..0.3) {
            let ms: Vec<_> = px.iter().map(|&(u, v, d, q)| measure(&pose, u, v, d, Some(q))).collect();
            let h: Vec<f64> = ms.iter().map(|m| barrier(&pose, &m.rho_hat, 0.33)).collect();
            let (lo, hi): (Vec<f64>, Vec<f64>) = ms.iter().map(|m| barrier_range(&pose, m.set.as_ref().unwrap(), 0.33)).unzip();
            let lambda = index_set(&h, delta, usize::MAX);
            let robust = robust_index_set(&lo, &hi, delta, usize::MAX);
            for i in &lambda {
                prop_assert!(robust.contains(i));
            }
        }

        #[test]
        fn singleton_sets_match_naive((pose, px) in instance(), v_des in -0.3f64..0.5, w in -1.0f64..1.0) {
            let ms: Vec<_> = px.iter().map(|&(u, v, d, _)| measure(&pose, u, v, d, Some(0))).collect();
            let cfg = BarrierConfig::default();
            let a = naive_controller([v_des, w], &pose, &ms, &cfg).unwrap();
            let b = robust_controller([v_des, w], &pose, &ms, &cfg).unwrap();
            prop_assert_eq!(&a.active_pixels, &b.active_pixels);
            prop_assert!((a.u[0] - b.u[0]).abs() <= 1e-9 && (a.u[1] - b.u[1]).abs() <= 1e-9);
        }

        #[test]
        fn filtered_speed_never_exceeds_desired((pose, px) in instance(), v_des in -0.3f64..0.5) {
            let ms: Vec<_> = px.iter().map(|&(u, v, d, q)| measure(&pose, u, v, d, Some(q))).collect();
            let cfg = BarrierConfig::default();
            for r in [naive_controller([v_des, 0.2], &pose, &ms, &cfg).unwrap(), robust_controller([v_des, 0.2], &pose, &ms, &cfg).unwrap()] {
                prop_assert!(r.feasible);
                prop_assert!(r.u[0] <= v_des + 1e-12);
                prop_assert!(r.qp.residuals.max() <= 1e-8);
            }
        }
    }
}
