//! Procedural scenes, ray-cast trinocular rendering and ground-truth disparities.
//!
//! Camera placement: the reference camera (`I1`) sits at the robot origin; the
//! centre camera (`I2`) is displaced `b/2` to the right and the right camera
//! (`I3`) by `b`, all looking along the heading. A backdrop plane at constant
//! forward depth `background_depth`, rigidly attached to the rig, catches every
//! ray that misses the obstacles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{to_robot_frame, transform, CameraRig, Disparity, Point3, RobotPose};
use crate::image::GrayImage;
use crate::stereo::DisparityMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("scene needs at least one obstacle")]
    NoObstacles,
    #[error("invalid obstacle {index}: {reason}")]
    InvalidObstacle { index: usize, reason: String },
    #[error("invalid texture: {0}")]
    InvalidTexture(String),
    #[error("background depth must be positive")]
    InvalidBackground,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TextureKind {
    /// 3-D checkerboard with cell size `period_m`.
    Checker { period_m: f64, contrast: f64 },
    /// Smooth lattice value noise with feature size `scale_m`.
    ValueNoise { scale_m: f64, seed: u64, contrast: f64 },
    Flat { intensity: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureSpec {
    pub kind: TextureKind,
    pub base_intensity: f64,
}

impl TextureSpec {
    pub fn flat(intensity: f64) -> Self {
        Self { kind: TextureKind::Flat { intensity }, base_intensity: intensity }
    }

    pub fn checker(period_m: f64, contrast: f64, base_intensity: f64) -> Self {
        Self { kind: TextureKind::Checker { period_m, contrast }, base_intensity }
    }

    pub fn value_noise(scale_m: f64, seed: u64, contrast: f64, base_intensity: f64) -> Self {
        Self { kind: TextureKind::ValueNoise { scale_m, seed, contrast }, base_intensity }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidTexture(m.to_owned()));
        if !(0.0..=255.0).contains(&self.base_intensity) {
            return bad("base_intensity outside [0, 255]");
        }
        match self.kind {
            TextureKind::Checker { period_m, contrast } => {
                if !(period_m > 0.0) {
                    return bad("checker period must be positive");
                }
                if !(0.0..=1.0).contains(&contrast) {
                    return bad("contrast outside [0, 1]");
                }
            }
            TextureKind::ValueNoise { scale_m, contrast, .. } => {
                if !(scale_m > 0.0) {
                    return bad("noise scale must be positive");
                }
                if !(0.0..=1.0).contains(&contrast) {
                    return bad("contrast outside [0, 1]");
                }
            }
            TextureKind::Flat { intensity } => {
                if !(0.0..=255.0).contains(&intensity) {
                    return bad("flat intensity outside [0, 255]");
                }
            }
        }
        Ok(())
    }

    /// Intensity in `[0, 255]` at a 3-D surface point.
    pub fn sample(&self, p: &Point3<f64>) -> f64 {
        let value = match self.kind {
            TextureKind::Flat { intensity } => intensity,
            TextureKind::Checker { period_m, contrast } => {
                let cell = (p.x / period_m).floor() + (p.y / period_m).floor() + (p.z / period_m).floor();
                let sign = if (cell as i64).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                self.base_intensity * (1.0 + sign * contrast)
            }
            TextureKind::ValueNoise { scale_m, seed, contrast } => {
                let n = value_noise(p.x / scale_m, p.y / scale_m, p.z / scale_m, seed);
                self.base_intensity * (1.0 + contrast * (2.0 * n - 1.0))
            }
        };
        value.clamp(0.0, 255.0)
    }
}

fn lattice_hash(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for k in [x, y, z] {
        h ^= k as u64;
        // splitmix64 finaliser
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, z: f64, seed: u64) -> f64 {
    let (fx, fy, fz) = (x.floor(), y.floor(), z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty, tz) = (smooth(x - fx), smooth(y - fy), smooth(z - fz));
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c = |dx, dy, dz| lattice_hash(ix + dx, iy + dy, iz + dz, seed);
    let x00 = lerp(c(0, 0, 0), c(1, 0, 0), tx);
    let x10 = lerp(c(0, 1, 0), c(1, 1, 0), tx);
    let x01 = lerp(c(0, 0, 1), c(1, 0, 1), tx);
    let x11 = lerp(c(0, 1, 1), c(1, 1, 1), tx);
    lerp(lerp(x00, x10, ty), lerp(x01, x11, ty), tz)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere { center: Point3<f64>, radius: f64 },
    /// Infinite plane through `point`.
    Plane { point: Point3<f64>, normal: Point3<f64> },
    /// Bounded rectangle; `up` must be orthogonal to `normal`.
    Panel { center: Point3<f64>, normal: Point3<f64>, up: Point3<f64>, half_width: f64, half_height: f64 },
}

const HIT_EPS: f64 = 1e-9;

impl Shape {
    /// Vertical rectangle facing `-x` (toward a robot looking along `+x`).
    pub fn fronto_panel(center: Point3<f64>, half_width: f64, half_height: f64) -> Self {
        Shape::Panel {
            center,
            normal: Point3::new(-1.0, 0.0, 0.0),
            up: Point3::new(0.0, 0.0, 1.0),
            half_width,
            half_height,
        }
    }

    /// Smallest ray parameter `t > 0` with `origin + t * dir` on the surface.
    pub fn intersect(&self, origin: &Point3<f64>, dir: &Point3<f64>) -> Option<f64> {
        match self {
            Shape::Sphere { center, radius } => {
                let oc = origin.sub(center);
                let a = dir.dot(dir);
                let half_b = oc.dot(dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = half_b * half_b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-half_b - sq) / a;
                let t1 = (-half_b + sq) / a;
                [t0, t1].into_iter().find(|&t| t > HIT_EPS)
            }
            Shape::Plane { point, normal } => plane_hit(point, normal, origin, dir),
            Shape::Panel { center, normal, up, half_width, half_height } => {
                let t = plane_hit(center, normal, origin, dir)?;
                let hit = origin.add(&dir.scale(t));
                let rel = hit.sub(center);
                let across = cross(normal, up);
                let nw = across.norm();
                let lateral = rel.dot(&across) / nw;
                let vertical = rel.dot(up) / up.norm();
                (lateral.abs() <= *half_width && vertical.abs() <= *half_height).then_some(t)
            }
        }
    }

    fn validate(&self, index: usize) -> Result<(), SceneError> {
        let bad = |reason: &str| Err(SceneError::InvalidObstacle { index, reason: reason.into() });
        match self {
            Shape::Sphere { center, radius } => {
                if !(*radius > 0.0) || !center.is_finite() {
                    return bad("sphere radius must be positive");
                }
            }
            Shape::Plane { normal, .. } => {
                if (normal.norm() - 1.0).abs() > 1e-9 {
                    return bad("plane normal must be unit length");
                }
            }
            Shape::Panel { normal, up, half_width, half_height, .. } => {
                if (normal.norm() - 1.0).abs() > 1e-9 || (up.norm() - 1.0).abs() > 1e-9 {
                    return bad("panel normal and up must be unit length");
                }
                if normal.dot(up).abs() > 1e-9 {
                    return bad("panel up must be orthogonal to its normal");
                }
                if !(*half_width > 0.0 && *half_height > 0.0) {
                    return bad("panel extents must be positive");
                }
            }
        }
        Ok(())
    }

    /// Planar distance from `(x, y)` to the nearest point of the shape's
    /// horizontal cross-section through `z = 0`.
    pub fn planar_clearance(&self, x: f64, y: f64) -> f64 {
        match self {
            Shape::Sphere { center, radius } => {
                let r2 = radius * radius - center.z * center.z;
                let r = if r2 > 0.0 { r2.sqrt() } else { 0.0 };
                ((x - center.x).hypot(y - center.y) - r).max(0.0)
            }
            Shape::Plane { point, normal } | Shape::Panel { center: point, normal, .. } => {
                let d = (x - point.x) * normal.x + (y - point.y) * normal.y;
                let h = normal.x.hypot(normal.y);
                if h > 0.0 { (d / h).abs() } else { f64::INFINITY }
            }
        }
    }
}

fn plane_hit(point: &Point3<f64>, normal: &Point3<f64>, origin: &Point3<f64>, dir: &Point3<f64>) -> Option<f64> {
    let denom = dir.dot(normal);
    if denom.abs() < 1e-15 {
        return None;
    }
    let t = point.sub(origin).dot(normal) / denom;
    (t > HIT_EPS).then_some(t)
}

fn cross(a: &Point3<f64>, b: &Point3<f64>) -> Point3<f64> {
    Point3::new(a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub shape: Shape,
    pub texture: TextureSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    obstacles: Vec<Obstacle>,
    background_depth: f64,
    background_texture: TextureSpec,
}

impl Scene {
    pub fn new(
        obstacles: Vec<Obstacle>,
        background_depth: f64,
        background_texture: TextureSpec,
    ) -> Result<Self, SceneError> {
        if obstacles.is_empty() {
            return Err(SceneError::NoObstacles);
        }
        for (i, o) in obstacles.iter().enumerate() {
            o.shape.validate(i)?;
            o.texture.validate()?;
        }
        background_texture.validate()?;
        if !(background_depth > 0.0) || !background_depth.is_finite() {
            return Err(SceneError::InvalidBackground);
        }
        Ok(Self { obstacles, background_depth, background_texture })
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn background_depth(&self) -> f64 {
        self.background_depth
    }

    pub fn background_texture(&self) -> &TextureSpec {
        &self.background_texture
    }

    /// Nearest obstacle hit along a world ray: `(t, obstacle index)`.
    pub fn cast(&self, origin: &Point3<f64>, dir: &Point3<f64>) -> Option<(f64, usize)> {
        self.obstacles
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.shape.intersect(origin, dir).map(|t| (t, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Whether a planar position lies inside (or on) any obstacle.
    pub fn collides(&self, x: f64, y: f64) -> bool {
        self.obstacles.iter().any(|o| match &o.shape {
            Shape::Sphere { center, radius } => {
                let d = Point3::new(x, y, 0.0).distance(center);
                d <= *radius
            }
            _ => false,
        })
    }
}

/// Time-synchronised left/centre/right images.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTriple {
    pub left: GrayImage,
    pub center: GrayImage,
    pub right: GrayImage,
}

/// Ground truth for the reference camera. Never used for training.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub d12: DisparityMap,
    pub d23: DisparityMap,
    pub d13: DisparityMap,
    /// Forward depth per `I1` pixel.
    pub depth: Vec<f64>,
    /// True where the `I1` surface point is hidden from (or outside) `I2` or `I3`.
    pub occlusion_mask: Vec<bool>,
    /// World position per `I1` pixel, `None` where the ray reached the backdrop.
    pub points: Vec<Option<Point3<f64>>>,
}

impl GroundTruth {
    pub fn is_occluded(&self, u: usize, v: usize) -> bool {
        self.occlusion_mask[v * self.d13.width() + u]
    }
}

/// Lateral offset (rig `left` axis) of camera `k` in `{0, 1, 2}`.
pub fn camera_offset(rig: &CameraRig<f64>, k: usize) -> f64 {
    -(k as f64) * rig.baseline_m() * 0.5
}

struct CameraRender {
    image: GrayImage,
    depth: Vec<f64>,
    points: Vec<Option<Point3<f64>>>,
}

fn render_camera(scene: &Scene, pose: &RobotPose<f64>, rig: &CameraRig<f64>, k: usize) -> CameraRender {
    let (w, h) = (rig.width(), rig.height());
    let cam_rig = Point3::new(0.0, camera_offset(rig, k), 0.0);
    let origin = transform(pose, &cam_rig);
    let (c, s) = pose.heading();
    let rows: Vec<RenderedRow> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut pix = Vec::with_capacity(w);
            let mut depth = Vec::with_capacity(w);
            let mut pts = Vec::with_capacity(w);
            for u in 0..w {
                let ray = rig.ray(crate::geometry::PixelCoord::new(u, v));
                let dir = Point3::new(c * ray.x - s * ray.y, s * ray.x + c * ray.y, ray.z);
                match scene.cast(&origin, &dir) {
                    Some((t, i)) if t < scene.background_depth => {
                        let hit = origin.add(&dir.scale(t));
                        pix.push(quantize(scene.obstacles[i].texture.sample(&hit)));
                        depth.push(t);
                        pts.push(Some(hit));
                    }
                    _ => {
                        let local = cam_rig.add(&ray.scale(scene.background_depth));
                        pix.push(quantize(scene.background_texture.sample(&local)));
                        depth.push(scene.background_depth);
                        pts.push(None);
                    }
                }
            }
            (pix, depth, pts)
        })
        .collect();
    let mut data = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut points = Vec::with_capacity(w * h);
    for (p, d, q) in rows {
        data.extend(p);
        depth.extend(d);
        points.extend(q);
    }
    CameraRender { image: GrayImage::from_raw(w, h, data).expect("sized"), depth, points }
}

fn quantize(x: f64) -> u8 {
    x.round().clamp(0.0, 255.0) as u8
}

/// Integer ground-truth disparity: round half to even, clamped to `0..=d_max`.
pub fn quantize_disparity(focal_baseline: f64, depth: f64, d_max: Disparity) -> Disparity {
    let d = (focal_baseline / depth).round_ties_even();
    d.clamp(0.0, f64::from(d_max)) as Disparity
}

type RenderedRow = (Vec<u8>, Vec<f64>, Vec<Option<Point3<f64>>>);

/// Renders `(I1, I2, I3)` and ground truth at `pose`.
pub fn render_triple(
    scene: &Scene,
    pose: &RobotPose<f64>,
    rig: &CameraRig<f64>,
) -> (ImageTriple, GroundTruth) {
    let cams: Vec<CameraRender> = (0..3).map(|k| render_camera(scene, pose, rig, k)).collect();
    let (w, h, d_max) = (rig.width(), rig.height(), rig.d_max());
    let fb = rig.focal_baseline();
    let mut d12 = DisparityMap::invalid(w, h, d_max);
    let mut d23 = DisparityMap::invalid(w, h, d_max);
    let mut d13 = DisparityMap::invalid(w, h, d_max);
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            d13.set(u, v, Some(quantize_disparity(fb, cams[0].depth[i], d_max)));
            d12.set(u, v, Some(quantize_disparity(0.5 * fb, cams[0].depth[i], d_max)));
            d23.set(u, v, Some(quantize_disparity(0.5 * fb, cams[1].depth[i], d_max)));
        }
    }
    let occlusion_mask = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (u, v) = (i % w, i / w);
            let local = match cams[0].points[i] {
                Some(p) => to_robot_frame(pose, &p),
                None => rig.ray(crate::geometry::PixelCoord::new(u, v)).scale(cams[0].depth[i]),
            };
            (1..3).any(|k| !visible_from(scene, pose, rig, k, &local, cams[0].points[i].is_some()))
        })
        .collect();
    let [c1, c2, c3]: [CameraRender; 3] = cams.try_into().ok().expect("three cameras");
    let triple = ImageTriple { left: c1.image, center: c2.image, right: c3.image };
    let gt = GroundTruth { d12, d23, d13, depth: c1.depth, occlusion_mask, points: c1.points };
    (triple, gt)
}

/// Whether rig-frame point `local` projects inside camera `k`'s image and is
/// not hidden by a nearer surface.
fn visible_from(
    scene: &Scene,
    pose: &RobotPose<f64>,
    rig: &CameraRig<f64>,
    k: usize,
    local: &Point3<f64>,
    on_obstacle: bool,
) -> bool {
    let cam = Point3::new(0.0, camera_offset(rig, k), 0.0);
    let rel = local.sub(&cam);
    if rel.x <= 0.0 {
        return false;
    }
    let (cu, cv) = rig.principal_point();
    let f = rig.focal_length_px();
    let col = cu - f * rel.y / rel.x;
    let row = cv - f * rel.z / rel.x;
    if col < -0.5 || col >= rig.width() as f64 - 0.5 || row < -0.5 || row >= rig.height() as f64 - 0.5 {
        return false;
    }
    let dir_local = rel.scale(1.0 / rel.x);
    let origin = transform(pose, &cam);
    let (c, s) = pose.heading();
    let dir = Point3::new(c * dir_local.x - s * dir_local.y, s * dir_local.x + c * dir_local.y, dir_local.z);
    match scene.cast(&origin, &dir) {
        Some((t, _)) if t < scene.background_depth => {
            let tol = 1e-9 * rel.x.max(1.0);
            on_obstacle && t >= rel.x - tol
        }
        _ => !on_obstacle || rel.x >= scene.background_depth,
    }
}

/// Rectangular pixel region `[u0, u1) x [v0, v1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub u0: usize,
    pub v0: usize,
    pub u1: usize,
    pub v1: usize,
}

impl Region {
    pub fn full(width: usize, height: usize) -> Self {
        Self { u0: 0, v0: 0, u1: width, v1: height }
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        u >= self.u0 && u < self.u1 && v >= self.v0 && v < self.v1
    }
}

/// Scripted disparity corruption. Positive `bias` lowers disparities, so the
/// corrupted map overestimates distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub region: Option<Region>,
    pub bias: i32,
    /// Fraction of pixels in the region that are corrupted, drawn with `seed`.
    pub fraction: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn uniform(bias: i32) -> Self {
        Self { region: None, bias, fraction: 1.0, seed: 0 }
    }
}

pub fn corrupt_disparity(d: &DisparityMap, spec: &CorruptionSpec) -> DisparityMap {
    let (w, h) = d.dims();
    let region = spec.region.unwrap_or(Region::full(w, h));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = d.clone();
    let d_max = i32::from(d.d_max());
    for v in 0..h {
        for u in 0..w {
            if !region.contains(u, v) {
                continue;
            }
            // Draw for every in-region pixel so the pattern does not depend on validity.
            let hit = spec.fraction >= 1.0 || rng.gen::<f64>() < spec.fraction;
            if let (true, Some(x)) = (hit, d.get(u, v)) {
                let y = (i32::from(x) - spec.bias).clamp(0, d_max);
                out.set(u, v, Some(y as Disparity));
            }
        }
    }
    out
}
