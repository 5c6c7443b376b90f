//! Camera rig model, disparity reprojection and planar robot-to-world transforms.
//!
//! Frames: a camera-frame point is `(forward, left, up)` with the reference
//! (left, `I1`) camera at the robot origin looking along the heading. The first
//! component is the forward range, so `reproject(..).x` is the positive scalar
//! that multiplies `v` in the barrier derivative.

use thiserror::Error;

use crate::scalar::Real;

/// Integer disparity value in `0..=d_max`.
pub type Disparity = u16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("zero disparity reprojects to infinity")]
    ZeroDisparity,
    #[error("disparity {d} exceeds d_max {d_max}")]
    DisparityOutOfRange { d: Disparity, d_max: Disparity },
    #[error("invalid camera rig: {0}")]
    InvalidRig(String),
}

/// Three-camera multibaseline rig. `baseline_m` is the wide (`I1`-`I3`)
/// baseline; the centre camera sits at half of it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraRig<T> {
    focal_length_px: T,
    baseline_m: T,
    cu: T,
    cv: T,
    width: usize,
    height: usize,
    d_max: Disparity,
}

impl<T: Real> CameraRig<T> {
    pub fn new(
        focal_length_px: T,
        baseline_m: T,
        principal_point: (T, T),
        width: usize,
        height: usize,
        d_max: Disparity,
    ) -> Result<Self, GeometryError> {
        let (cu, cv) = principal_point;
        if !(focal_length_px > T::zero()) || !focal_length_px.is_finite() {
            return Err(GeometryError::InvalidRig("focal length must be positive".into()));
        }
        if !(baseline_m > T::zero()) || !baseline_m.is_finite() {
            return Err(GeometryError::InvalidRig("baseline must be positive".into()));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidRig("image dimensions must be positive".into()));
        }
        let w = T::from_usize_lossy(width);
        let h = T::from_usize_lossy(height);
        if !(cu >= T::zero() && cu < w && cv >= T::zero() && cv < h) {
            return Err(GeometryError::InvalidRig("principal point outside image".into()));
        }
        if d_max < 1 || usize::from(d_max) >= width {
            return Err(GeometryError::InvalidRig(format!(
                "d_max must satisfy 1 <= d_max < width, got {d_max}"
            )));
        }
        Ok(Self { focal_length_px, baseline_m, cu, cv, width, height, d_max })
    }

    /// Rig with the principal point at the image centre.
    pub fn centered(
        focal_length_px: T,
        baseline_m: T,
        width: usize,
        height: usize,
        d_max: Disparity,
    ) -> Result<Self, GeometryError> {
        let cu = T::from_usize_lossy(width) * T::half();
        let cv = T::from_usize_lossy(height) * T::half();
        Self::new(focal_length_px, baseline_m, (cu, cv), width, height, d_max)
    }

    pub fn focal_length_px(&self) -> T {
        self.focal_length_px
    }
    pub fn baseline_m(&self) -> T {
        self.baseline_m
    }
    pub fn principal_point(&self) -> (T, T) {
        (self.cu, self.cv)
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn d_max(&self) -> Disparity {
        self.d_max
    }

    /// `f * b` for the wide baseline; forward range is `focal_baseline() / d`.
    pub fn focal_baseline(&self) -> T {
        self.focal_length_px * self.baseline_m
    }

    pub fn contains(&self, p: PixelCoord) -> bool {
        p.u < self.width && p.v < self.height
    }

    /// Camera-frame ray through the pixel centre, scaled to unit forward component.
    pub fn ray(&self, p: PixelCoord) -> Point3<T> {
        let u = T::from_usize_lossy(p.u);
        let v = T::from_usize_lossy(p.v);
        Point3::new(
            T::one(),
            -(u - self.cu) / self.focal_length_px,
            -(v - self.cv) / self.focal_length_px,
        )
    }

    /// Lossless conversion to another scalar type (up to that type's precision).
    pub fn cast<U: Real>(&self) -> CameraRig<U> {
        let c = |x: T| U::lit(x.to_f64().expect("finite"));
        CameraRig {
            focal_length_px: c(self.focal_length_px),
            baseline_m: c(self.baseline_m),
            cu: c(self.cu),
            cv: c(self.cv),
            width: self.width,
            height: self.height,
            d_max: self.d_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelCoord {
    pub u: usize,
    pub v: usize,
}

impl PixelCoord {
    pub fn new(u: usize, v: usize) -> Self {
        Self { u, v }
    }
}

/// Planar unicycle pose; `theta` is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotPose<T> {
    pub x: T,
    pub y: T,
    pub theta: T,
}

impl<T: Real> RobotPose<T> {
    pub fn new(x: T, y: T, theta: T) -> Self {
        Self { x, y, theta: normalize_angle(theta) }
    }

    pub fn origin() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn heading(&self) -> (T, T) {
        (self.theta.cos(), self.theta.sin())
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle<T: Real>(theta: T) -> T {
    let pi = T::lit(std::f64::consts::PI);
    let two_pi = pi + pi;
    let mut a = theta % two_pi;
    if a > pi {
        a -= two_pi;
    } else if a <= -pi {
        a += two_pi;
    }
    a
}

/// Three-vector. In the camera frame the components are `(forward, left, up)`;
/// after [`transform`] they are world `(x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Point3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn forward(&self) -> T {
        self.x
    }

    pub fn sub(&self, o: &Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn add(&self, o: &Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn scale(&self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(&self, o: &Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, o: &Self) -> T {
        self.sub(o).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Stereo reprojection of pixel `p` at wide-baseline disparity `d` into the
/// reference camera frame: `forward = f b / d`.
pub fn reproject<T: Real>(
    rig: &CameraRig<T>,
    p: PixelCoord,
    d: Disparity,
) -> Result<Point3<T>, GeometryError> {
    if d == 0 {
        return Err(GeometryError::ZeroDisparity);
    }
    if d > rig.d_max {
        return Err(GeometryError::DisparityOutOfRange { d, d_max: rig.d_max });
    }
    let forward = rig.focal_baseline() / T::from_u16(d).expect("u16 fits");
    Ok(rig.ray(p).scale(forward))
}

/// Planar rigid transform of a camera-frame point into the world frame.
pub fn transform<T: Real>(pose: &RobotPose<T>, q: &Point3<T>) -> Point3<T> {
    let (c, s) = pose.heading();
    Point3::new(pose.x + c * q.x - s * q.y, pose.y + s * q.x + c * q.y, q.z)
}

/// Inverse of [`transform`]: world point into the robot/camera frame.
pub fn to_robot_frame<T: Real>(pose: &RobotPose<T>, w: &Point3<T>) -> Point3<T> {
    let (c, s) = pose.heading();
    let dx = w.x - pose.x;
    let dy = w.y - pose.y;
    Point3::new(c * dx + s * dy, -s * dx + c * dy, w.z)
}

/// World position of the scene point seen at pixel `p` with disparity `d`.
pub fn pixel_position<T: Real>(
    pose: &RobotPose<T>,
    rig: &CameraRig<T>,
    p: PixelCoord,
    d: Disparity,
) -> Result<Point3<T>, GeometryError> {
    Ok(transform(pose, &reproject(rig, p, d)?))
}
