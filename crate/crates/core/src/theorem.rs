//! Sampled Lipschitz constants and a randomized check that the robust
//! constraint on measured points implies the nonsmooth barrier condition on
//! the true points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error_model::{epsilon_bound, uncertainty_set};
use crate::geometry::{pixel_position, CameraRig, Disparity, PixelCoord, Point3, RobotPose};
use crate::qp::{cbf_qp, HalfPlane};
use crate::safety::{barrier, h_dot, lie_g, mr_cbf_constraint, BarrierConfig, LipschitzConstants, PixelMeasurement, SafetyError};
use crate::scalar::Real;

/// Box of robot poses and disparity range over which obstacle points are sampled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzDomain<T> {
    pub x: (T, T),
    pub y: (T, T),
    pub theta: (T, T),
    pub disparity: (Disparity, Disparity),
}

impl<T: Real> LipschitzDomain<T> {
    pub fn around_origin(radius: T, d_max: Disparity) -> Self {
        let pi = T::lit(std::f64::consts::PI);
        Self { x: (-radius, radius), y: (-radius, radius), theta: (-pi, pi), disparity: (1, d_max) }
    }

    fn sample_pose(&self, rng: &mut ChaCha8Rng) -> RobotPose<T> {
        let mut draw = |(lo, hi): (T, T)| {
            let s: f64 = rng.gen();
            lo + (hi - lo) * T::lit(s)
        };
        let x = draw(self.x);
        let y = draw(self.y);
        let theta = draw(self.theta);
        RobotPose::new(x, y, theta)
    }
}

pub const LIPSCHITZ_SAFETY_FACTOR: f64 = 1.5;

/// Largest sampled finite-difference quotient of `L_f h`, `gamma o h` and
/// `L_g h` with respect to the obstacle point, times `safety_factor`.
pub fn estimate_lipschitz<T: Real>(
    domain: &LipschitzDomain<T>,
    rig: &CameraRig<T>,
    cfg: &BarrierConfig<T>,
    samples: usize,
    seed: u64,
    safety_factor: T,
) -> Result<LipschitzConstants<T>, SafetyError> {
    if samples < 2 {
        return Err(SafetyError::InvalidConfig("at least two samples required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = T::lit(1e-4);
    let mut est = LipschitzConstants::<T>::zero();
    for _ in 0..samples {
        let pose = domain.sample_pose(&mut rng);
        let p = PixelCoord::new(rng.gen_range(0..rig.width()), rng.gen_range(0..rig.height()));
        let d = rng.gen_range(domain.disparity.0..=domain.disparity.1);
        let rho = pixel_position(&pose, rig, p, d).map_err(|e| SafetyError::InvalidInstance(e.to_string()))?;
        let dir = Point3::new(
            T::lit(rng.gen_range(-1.0..1.0)),
            T::lit(rng.gen_range(-1.0..1.0)),
            T::lit(rng.gen_range(-1.0..1.0)),
        );
        let n = dir.norm();
        if n <= T::lit(1e-6) {
            continue;
        }
        let delta = dir.scale(step / n);
        let other = rho.add(&delta);
        let dist = delta.norm();

        // The unicycle drift is zero, so L_f h is constant in the obstacle point.
        let lf = T::zero();
        est.l_lfh = est.l_lfh.max(lf);

        let dh = cfg.gamma(barrier(&pose, &rho, cfg.c)) - cfg.gamma(barrier(&pose, &other, cfg.c));
        est.l_gamma_hns = est.l_gamma_hns.max(dh.abs() / dist);

        let (g1, g2) = (lie_g(&pose, &rho), lie_g(&pose, &other));
        let dg = ((g1[0] - g2[0]).powi(2) + (g1[1] - g2[1]).powi(2)).sqrt();
        est.l_lgh = est.l_lgh.max(dg / dist);
    }
    Ok(est.scaled(safety_factor))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImplicationOutcome {
    /// The robust constraint fails somewhere in the robust index set.
    Vacuous,
    Holds,
    Violated,
}

const PREMISE_TOL: f64 = 1e-10;
const CONCLUSION_TOL: f64 = 1e-9;

/// Evaluates the implication for a single instance. The robust constraint
/// uses the actual `|u|`; the conclusion is taken over the pixels attaining
/// the true barrier minimum.
pub fn evaluate_implication<T: Real>(
    pose: &RobotPose<T>,
    truth: &[Point3<T>],
    measured: &[PixelMeasurement<T>],
    u: [T; 2],
    cfg: &BarrierConfig<T>,
) -> Result<ImplicationOutcome, SafetyError> {
    if truth.is_empty() || truth.len() != measured.len() {
        return Err(SafetyError::InvalidInstance("truth and measurements must be nonempty and aligned".into()));
    }
    let mut eps = Vec::with_capacity(truth.len());
    let mut h_lo = Vec::with_capacity(truth.len());
    let mut h_hi = Vec::with_capacity(truth.len());
    for (i, (rho, m)) in truth.iter().zip(measured).enumerate() {
        let set = m
            .set
            .as_ref()
            .ok_or_else(|| SafetyError::InvalidInstance(format!("pixel {i} has no uncertainty set")))?;
        let tol = T::lit(1e-9) * (T::one() + rho.norm());
        if !set.members().any(|(_, r)| r.distance(rho) <= tol) {
            return Err(SafetyError::InvalidInstance(format!("true point of pixel {i} lies outside its set")));
        }
        eps.push(epsilon_bound(set));
        let (lo, hi) = crate::safety::barrier_range(pose, set, cfg.c);
        h_lo.push(lo);
        h_hi.push(hi);
    }

    let h_meas: Vec<T> = measured.iter().map(|m| barrier(pose, &m.rho_hat, cfg.c)).collect();
    let h_ns_meas = h_meas.iter().copied().fold(T::infinity(), T::min);
    let u_norm = (u[0] * u[0] + u[1] * u[1]).sqrt();
    let robust = crate::safety::robust_index_set(&h_lo, &h_hi, cfg.delta, usize::MAX);
    let with_norm = BarrierConfig { u_max: u_norm, ..*cfg };
    for &i in &robust {
        let c = mr_cbf_constraint(pose, &measured[i].rho_hat, eps[i], &with_norm, h_ns_meas);
        if c.slack(u) < -T::lit(PREMISE_TOL) {
            return Ok(ImplicationOutcome::Vacuous);
        }
    }

    let h_true: Vec<T> = truth.iter().map(|r| barrier(pose, r, cfg.c)).collect();
    let h_ns_true = h_true.iter().copied().fold(T::infinity(), T::min);
    let worst = (0..truth.len())
        .filter(|&i| h_true[i] <= h_ns_true)
        .map(|i| h_dot(pose, &truth[i], u))
        .fold(T::infinity(), T::min);
    if worst + cfg.gamma(h_ns_true) >= -T::lit(CONCLUSION_TOL) {
        Ok(ImplicationOutcome::Holds)
    } else {
        Ok(ImplicationOutcome::Violated)
    }
}

/// `true` unless the robust constraint holds on the measured points while
/// the true nonsmooth barrier condition fails.
pub fn check_robust_implication<T: Real>(
    pose: &RobotPose<T>,
    truth: &[Point3<T>],
    measured: &[PixelMeasurement<T>],
    u: [T; 2],
    cfg: &BarrierConfig<T>,
) -> Result<bool, SafetyError> {
    Ok(evaluate_implication(pose, truth, measured, u, cfg)? != ImplicationOutcome::Violated)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TheoremReport {
    pub trials: usize,
    pub premise_held: usize,
    pub vacuous: usize,
    pub violations: usize,
}

/// Smallest disparity of any candidate point in verifier instances (ranges up to 2 m).
pub const VERIFIER_MIN_DISPARITY: Disparity = 6;

/// Rig used by the randomized verifier.
pub fn verifier_rig() -> CameraRig<f64> {
    CameraRig::new(100.0, 0.12, (80.0, 60.0), 160, 120, 48).expect("valid rig")
}

/// Runs `trials` random instances. Each instance draws a pose, up to twelve
/// pixels with measured disparities, error bounds and a true disparity
/// inside each bound, filters a random desired input through the robust
/// constraints, and checks the implication. `lipschitz` overrides the
/// sampled constants.
pub fn run_theorem_trials(trials: usize, seed: u64, lipschitz: Option<LipschitzConstants<f64>>) -> TheoremReport {
    let rig = verifier_rig();
    let domain = LipschitzDomain { disparity: (VERIFIER_MIN_DISPARITY, rig.d_max()), ..LipschitzDomain::around_origin(1.0, rig.d_max()) };
    let mut cfg = BarrierConfig::<f64>::default();
    cfg.lipschitz = match lipschitz {
        Some(l) => l,
        None => estimate_lipschitz(&domain, &rig, &cfg, 20_000, seed ^ 0x5EED, LIPSCHITZ_SAFETY_FACTOR)
            .expect("sample count is valid"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TheoremReport { trials, ..TheoremReport::default() };
    for _ in 0..trials {
        let pose = domain.sample_pose(&mut rng);
        let c = rng.gen_range(0.2..0.6);
        let trial_cfg = BarrierConfig { c, ..cfg };
        let k = rng.gen_range(1..=12);
        let mut truth = Vec::with_capacity(k);
        let mut measured = Vec::with_capacity(k);
        for _ in 0..k {
            let p = PixelCoord::new(rng.gen_range(0..rig.width()), rng.gen_range(0..rig.height()));
            let d_hat: Disparity = rng.gen_range(VERIFIER_MIN_DISPARITY + 4..=rig.d_max());
            let q: Disparity = rng.gen_range(0..=4);
            let set = uncertainty_set(&rig, &pose, p, d_hat, q).expect("nonzero measured disparity");
            let rho = set.member(rng.gen_range(set.lower()..=set.upper()));
            truth.push(rho);
            measured.push(PixelMeasurement {
                pixel: p,
                rho_hat: set.measured,
                z: rig.focal_baseline() / f64::from(d_hat),
                set: Some(set),
            });
        }
        let u_des = [rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7)];
        let h_meas = measured.iter().map(|m| barrier(&pose, &m.rho_hat, c)).fold(f64::INFINITY, f64::min);
        let (lo, hi): (Vec<f64>, Vec<f64>) = measured
            .iter()
            .map(|m| crate::safety::barrier_range(&pose, m.set.as_ref().expect("set"), c))
            .unzip();
        let cons: Vec<HalfPlane<f64>> = crate::safety::robust_index_set(&lo, &hi, trial_cfg.delta, usize::MAX)
            .into_iter()
            .map(|i| {
                let eps = epsilon_bound(measured[i].set.as_ref().expect("set"));
                mr_cbf_constraint(&pose, &measured[i].rho_hat, eps, &trial_cfg, h_meas)
            })
            .collect();
        let sol = cbf_qp(u_des, &cons);
        let outcome = if sol.feasible {
            evaluate_implication(&pose, &truth, &measured, sol.u, &trial_cfg).expect("instance is valid")
        } else {
            ImplicationOutcome::Vacuous
        };
        match outcome {
            ImplicationOutcome::Vacuous => report.vacuous += 1,
            ImplicationOutcome::Holds => report.premise_held += 1,
            ImplicationOutcome::Violated => {
                report.premise_held += 1;
                report.violations += 1;
            }
        }
    }
    report
}
