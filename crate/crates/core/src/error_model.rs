//! Per-pixel categorical model of wide-baseline disparity error, trained
//! online from trinocular reconstruction discrepancies, and the uncertainty
//! sets it induces.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::{pixel_position, transform, CameraRig, Disparity, GeometryError, PixelCoord, Point3, RobotPose};
use crate::image::GrayImage;
use crate::scalar::Real;
use crate::scene::ImageTriple;
use crate::stereo::{reconstruct, reconstruction_error, CameraPair, DisparityMap, ErrorMap, Matcher, StereoError};

/// Number of per-pixel features, including the trailing constant bias.
pub const FEATURE_COUNT: usize = 6;
/// Error classes `|re| in {0, 1, 2, 3, >=4}`.
pub const DEFAULT_CLASSES: usize = 5;

const MODEL_MAGIC: &[u8; 4] = b"SCEM";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ErrorModelError {
    #[error("no pixel carries a valid reconstruction error")]
    NoValidPixels,
    #[error("uncertainty set is empty")]
    EmptySet,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Stereo(#[from] StereoError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed model file: {0}")]
    Format(String),
}

/// Fixed affine map `offset + raw / divisor` for one raw feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureTransform {
    pub offset: f64,
    pub divisor: f64,
}

impl FeatureTransform {
    fn apply(&self, raw: f64) -> f64 {
        self.offset + raw / self.divisor
    }
}

/// Fixed transforms applied to the raw features. No running statistics are
/// kept, so the feature map is stationary during online updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureScaling {
    /// Mean absolute horizontal gradient over a 3x3 window (intensity units).
    pub gradient: FeatureTransform,
    /// Intensity standard deviation over a 5x5 window.
    pub deviation: FeatureTransform,
    /// Census density: fraction of the 24 neighbours brighter than the centre.
    pub census: FeatureTransform,
    /// Mean absolute `I1`/`I3` difference at the matched shift, 3x3 window.
    pub discrepancy: FeatureTransform,
    /// Distance to the nearest image border divided by `min(W, H) / 2`.
    pub border: FeatureTransform,
}

pub const FEATURE_SCALING: FeatureScaling = FeatureScaling {
    gradient: FeatureTransform { offset: 0.0, divisor: 20.0 },
    deviation: FeatureTransform { offset: 0.0, divisor: 25.0 },
    census: FeatureTransform { offset: 20.0, divisor: 0.65 },
    discrepancy: FeatureTransform { offset: 20.0, divisor: 10.0 },
    border: FeatureTransform { offset: 20.0, divisor: 0.8 },
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector<T>(pub [T; FEATURE_COUNT]);

impl<T: Real> FeatureVector<T> {
    pub fn bias(&self) -> T {
        self.0[FEATURE_COUNT - 1]
    }
}

/// Precomputed per-frame tables for feature extraction.
pub struct FrameFeatures<'a> {
    i1: &'a GrayImage,
    i3: &'a GrayImage,
    d13: &'a DisparityMap,
    grad_sum: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

/// `(W + 1) x (H + 1)` summed-area table.
fn integral(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (w + 1) * (h + 1)];
    for v in 0..h {
        let mut row = 0.0;
        for u in 0..w {
            row += f(u, v);
            s[(v + 1) * (w + 1) + u + 1] = s[v * (w + 1) + u + 1] + row;
        }
    }
    s
}

impl<'a> FrameFeatures<'a> {
    pub fn new(i1: &'a GrayImage, i3: &'a GrayImage, d13: &'a DisparityMap) -> Result<Self, ErrorModelError> {
        if i1.dims() != i3.dims() || i1.dims() != d13.dims() {
            return Err(ErrorModelError::DimensionMismatch(format!(
                "I1 {:?}, I3 {:?}, d13 {:?}",
                i1.dims(),
                i3.dims(),
                d13.dims()
            )));
        }
        let (w, h) = i1.dims();
        let grad = |u: usize, v: usize| {
            let a = f64::from(i1.get((u + 1).min(w - 1), v));
            let b = f64::from(i1.get(u.saturating_sub(1), v));
            0.5 * (a - b).abs()
        };
        let grad_sum = integral(w, h, grad);
        let sum = integral(w, h, |u, v| f64::from(i1.get(u, v)));
        let sum_sq = integral(w, h, |u, v| f64::from(i1.get(u, v)).powi(2));
        Ok(Self { i1, i3, d13, grad_sum, sum, sum_sq })
    }

    fn window(&self, table: &[f64], u: usize, v: usize, r: usize) -> (f64, f64) {
        let (w, h) = self.i1.dims();
        let (u0, u1) = (u.saturating_sub(r), (u + r + 1).min(w));
        let (v0, v1) = (v.saturating_sub(r), (v + r + 1).min(h));
        let at = |uu: usize, vv: usize| table[vv * (w + 1) + uu];
        let s = at(u1, v1) - at(u0, v1) - at(u1, v0) + at(u0, v0);
        (s, ((u1 - u0) * (v1 - v0)) as f64)
    }

    pub fn at<T: Real>(&self, p: PixelCoord) -> FeatureVector<T> {
        let (w, h) = self.i1.dims();
        let (u, v) = (p.u, p.v);
        let sc = &FEATURE_SCALING;

        let (g, n) = self.window(&self.grad_sum, u, v, 1);
        let gradient = g / n;

        let (s, n) = self.window(&self.sum, u, v, 2);
        let (s2, _) = self.window(&self.sum_sq, u, v, 2);
        let mean = s / n;
        let deviation = (s2 / n - mean * mean).max(0.0).sqrt();

        let centre = self.i1.get(u, v);
        let mut brighter = 0u32;
        for dv in -2i64..=2 {
            for du in -2i64..=2 {
                if du == 0 && dv == 0 {
                    continue;
                }
                let uu = (u as i64 + du).clamp(0, w as i64 - 1) as usize;
                let vv = (v as i64 + dv).clamp(0, h as i64 - 1) as usize;
                brighter += u32::from(self.i1.get(uu, vv) > centre);
            }
        }
        let census = f64::from(brighter) / 24.0;

        let discrepancy = match self.d13.get(u, v) {
            Some(d) => {
                let mut acc = 0.0;
                for dv in -1i64..=1 {
                    for du in -1i64..=1 {
                        let uu = (u as i64 + du).clamp(0, w as i64 - 1);
                        let vv = (v as i64 + dv).clamp(0, h as i64 - 1) as usize;
                        let ur = (uu - i64::from(d)).clamp(0, w as i64 - 1) as usize;
                        acc += (f64::from(self.i1.get(uu as usize, vv)) - f64::from(self.i3.get(ur, vv))).abs();
                    }
                }
                acc / 9.0
            }
            None => 0.0,
        };

        let edge = u.min(w - 1 - u).min(v).min(h - 1 - v) as f64;
        let border = edge / (w.min(h) as f64 * 0.5);

        FeatureVector([
            T::lit(sc.gradient.apply(gradient)),
            T::lit(sc.deviation.apply(deviation)),
            T::lit(sc.census.apply(census)),
            T::lit(sc.discrepancy.apply(discrepancy)),
            T::lit(sc.border.apply(border)),
            T::one(),
        ])
    }
}

/// Features of pixel `p` from `(I1, I3)` and the measured wide-baseline map.
pub fn extract_features<T: Real>(
    i1: &GrayImage,
    i3: &GrayImage,
    d13_hat: &DisparityMap,
    p: PixelCoord,
) -> Result<FeatureVector<T>, ErrorModelError> {
    if p.u >= i1.width() || p.v >= i1.height() {
        return Err(ErrorModelError::DimensionMismatch(format!("pixel {p:?} outside image")));
    }
    Ok(FrameFeatures::new(i1, i3, d13_hat)?.at(p))
}

/// Categorical distribution over error classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical<T>(pub Vec<T>);

impl<T: Real> Categorical<T> {
    pub fn probs(&self) -> &[T] {
        &self.0
    }
}

/// Linear softmax weights `theta`, `F x C`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorModelParams<T> {
    features: usize,
    classes: usize,
    weights: Vec<T>,
}

impl<T: Real> ErrorModelParams<T> {
    pub fn zeros(features: usize, classes: usize) -> Self {
        assert!(classes >= 2, "need at least two classes");
        Self { features, classes, weights: vec![T::zero(); features * classes] }
    }

    pub fn from_weights(features: usize, classes: usize, weights: Vec<T>) -> Result<Self, ErrorModelError> {
        if classes < 2 || weights.len() != features * classes {
            return Err(ErrorModelError::DimensionMismatch(format!(
                "{} weights for {features}x{classes}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(ErrorModelError::Format("non-finite weight".into()));
        }
        Ok(Self { features, classes, weights })
    }

    pub fn features(&self) -> usize {
        self.features
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn weights(&self) -> &[T] {
        &self.weights
    }
    pub fn weight(&self, f: usize, c: usize) -> T {
        self.weights[f * self.classes + c]
    }
    pub fn set_weight(&mut self, f: usize, c: usize, x: T) {
        self.weights[f * self.classes + c] = x;
    }

    /// Softmax of `theta^T x` written into `out`, stabilised by subtracting the max logit.
    pub fn predict_into(&self, x: &FeatureVector<T>, out: &mut [T]) {
        debug_assert_eq!(out.len(), self.classes);
        debug_assert_eq!(self.features, FEATURE_COUNT);
        for (c, o) in out.iter_mut().enumerate() {
            let mut z = T::zero();
            for (f, xf) in x.0.iter().enumerate() {
                z += *xf * self.weights[f * self.classes + c];
            }
            *o = z;
        }
        let m = out.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for o in out.iter_mut() {
            *o = (*o - m).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    pub fn predict(&self, x: &FeatureVector<T>) -> Categorical<T> {
        let mut out = vec![T::zero(); self.classes];
        self.predict_into(x, &mut out);
        Categorical(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(self.features as u32).to_le_bytes())?;
        w.write_all(&(self.classes as u32).to_le_bytes())?;
        for x in &self.weights {
            w.write_all(&x.to_f64().unwrap_or(f64::NAN).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ErrorModelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(ErrorModelError::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != MODEL_VERSION {
            return Err(ErrorModelError::Format(format!("unsupported version {version}")));
        }
        r.read_exact(&mut b4)?;
        let features = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let classes = u32::from_le_bytes(b4) as usize;
        if features != FEATURE_COUNT {
            return Err(ErrorModelError::Format(format!("expected {FEATURE_COUNT} features, found {features}")));
        }
        let mut weights = Vec::with_capacity(features * classes);
        let mut b8 = [0u8; 8];
        for _ in 0..features * classes {
            r.read_exact(&mut b8)?;
            weights.push(T::lit(f64::from_le_bytes(b8)));
        }
        Self::from_weights(features, classes, weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ErrorModelError> {
        Self::read_from(io::BufReader::new(std::fs::File::open(path)?))
    }
}

impl<T: Real> Default for ErrorModelParams<T> {
    fn default() -> Self {
        Self::zeros(FEATURE_COUNT, DEFAULT_CLASSES)
    }
}

/// Features and error-class labels for one frame; unlabeled pixels are
/// excluded from the loss.
#[derive(Debug, Clone)]
pub struct TrainingFrame<T> {
    features: Vec<FeatureVector<T>>,
    labels: Vec<Option<u16>>,
}

impl<T: Real> TrainingFrame<T> {
    pub fn from_parts(features: Vec<FeatureVector<T>>, labels: Vec<Option<u16>>) -> Result<Self, ErrorModelError> {
        if features.len() != labels.len() {
            return Err(ErrorModelError::DimensionMismatch("features and labels differ in length".into()));
        }
        Ok(Self { features, labels })
    }

    /// Builds the frame from `(I1, I3, d13_hat, d13_bar)`; labels are the
    /// reconstruction errors `|d13_hat - d13_bar|`.
    pub fn from_frame(
        i1: &GrayImage,
        i3: &GrayImage,
        d13_hat: &DisparityMap,
        d13_bar: &DisparityMap,
    ) -> Result<Self, ErrorModelError> {
        let re = reconstruction_error(d13_hat, d13_bar)?;
        Self::from_error_map(i1, i3, d13_hat, &re)
    }

    pub fn from_error_map(
        i1: &GrayImage,
        i3: &GrayImage,
        d13_hat: &DisparityMap,
        re: &ErrorMap,
    ) -> Result<Self, ErrorModelError> {
        let table = FrameFeatures::new(i1, i3, d13_hat)?;
        let (w, h) = i1.dims();
        if (re.width(), re.height()) != (w, h) {
            return Err(ErrorModelError::DimensionMismatch("error map size".into()));
        }
        let mut features = Vec::with_capacity(w * h);
        let mut labels = Vec::with_capacity(w * h);
        for v in 0..h {
            for u in 0..w {
                features.push(table.at(PixelCoord::new(u, v)));
                labels.push(re.get(u, v));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &[FeatureVector<T>] {
        &self.features
    }
    pub fn labels(&self) -> &[Option<u16>] {
        &self.labels
    }
    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
    pub fn set_labels(&mut self, labels: Vec<Option<u16>>) {
        assert_eq!(labels.len(), self.features.len());
        self.labels = labels;
    }
}

fn class_of(re: u16, classes: usize) -> usize {
    usize::from(re).min(classes - 1)
}

/// Mean cross-entropy over labeled pixels.
pub fn loss<T: Real>(params: &ErrorModelParams<T>, frame: &TrainingFrame<T>) -> Result<T, ErrorModelError> {
    let mut p = vec![T::zero(); params.classes];
    let mut total = T::zero();
    let mut n = 0usize;
    for (x, y) in frame.features.iter().zip(&frame.labels) {
        let Some(y) = y else { continue };
        params.predict_into(x, &mut p);
        total -= p[class_of(*y, params.classes)].max(T::min_positive_value()).ln();
        n += 1;
    }
    if n == 0 {
        return Err(ErrorModelError::NoValidPixels);
    }
    Ok(total / T::from_usize_lossy(n))
}

/// Loss and its analytic gradient `mean((softmax - onehot) x^T)`.
pub fn loss_and_gradient<T: Real>(
    params: &ErrorModelParams<T>,
    frame: &TrainingFrame<T>,
) -> Result<(T, Vec<T>), ErrorModelError> {
    let c_n = params.classes;
    let mut p = vec![T::zero(); c_n];
    let mut grad = vec![T::zero(); params.weights.len()];
    let mut total = T::zero();
    let mut n = 0usize;
    for (x, y) in frame.features.iter().zip(&frame.labels) {
        let Some(y) = y else { continue };
        let k = class_of(*y, c_n);
        params.predict_into(x, &mut p);
        total -= p[k].max(T::min_positive_value()).ln();
        p[k] -= T::one();
        for (f, xf) in x.0.iter().enumerate() {
            let row = &mut grad[f * c_n..(f + 1) * c_n];
            for (g, r) in row.iter_mut().zip(&p) {
                *g += *r * *xf;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(ErrorModelError::NoValidPixels);
    }
    let inv = T::one() / T::from_usize_lossy(n);
    for g in &mut grad {
        *g *= inv;
    }
    Ok((total * inv, grad))
}

/// One gradient step on the frame's cross-entropy.
pub fn sgd_step<T: Real>(
    params: &ErrorModelParams<T>,
    frame: &TrainingFrame<T>,
    eta: T,
) -> Result<ErrorModelParams<T>, ErrorModelError> {
    let (_, grad) = loss_and_gradient(params, frame)?;
    Ok(apply_gradient(params, &grad, eta))
}

/// `theta - eta * grad`.
pub fn apply_gradient<T: Real>(params: &ErrorModelParams<T>, grad: &[T], eta: T) -> ErrorModelParams<T> {
    let mut next = params.clone();
    for (w, g) in next.weights.iter_mut().zip(grad) {
        *w -= eta * *g;
    }
    next
}

/// The three pairwise disparity maps of one trinocular frame.
#[derive(Debug, Clone)]
pub struct StereoObservation {
    pub d12: DisparityMap,
    pub d23: DisparityMap,
    pub d13: DisparityMap,
}

impl StereoObservation {
    pub fn compute(triple: &ImageTriple, matcher: &dyn Matcher) -> Result<Self, StereoError> {
        let ((d12, d23), d13) = rayon::join(
            || {
                rayon::join(
                    || matcher.disparity(CameraPair::LeftCenter, &triple.left, &triple.center),
                    || matcher.disparity(CameraPair::CenterRight, &triple.center, &triple.right),
                )
            },
            || matcher.disparity(CameraPair::LeftRight, &triple.left, &triple.right),
        );
        Ok(Self { d12: d12?, d23: d23?, d13: d13? })
    }

    /// `d12 (+) d23`.
    pub fn reconstructed(&self) -> Result<DisparityMap, StereoError> {
        reconstruct(&self.d12, &self.d23)
    }

    pub fn training_frame<T: Real>(&self, triple: &ImageTriple) -> Result<TrainingFrame<T>, ErrorModelError> {
        TrainingFrame::from_frame(&triple.left, &triple.right, &self.d13, &self.reconstructed()?)
    }
}

/// One self-supervised adaptation step from already computed disparities.
/// Returns the updated parameters and the pre-step loss; with no valid
/// pixel the parameters are returned unchanged and the loss is `None`.
pub fn adapt_on_observation<T: Real>(
    params: &ErrorModelParams<T>,
    triple: &ImageTriple,
    obs: &StereoObservation,
    eta: T,
) -> Result<(ErrorModelParams<T>, Option<T>), ErrorModelError> {
    let frame = obs.training_frame(triple)?;
    match loss_and_gradient(params, &frame) {
        Ok((l, grad)) => Ok((apply_gradient(params, &grad, eta), Some(l))),
        Err(ErrorModelError::NoValidPixels) => Ok((params.clone(), None)),
        Err(e) => Err(e),
    }
}

/// Match all three pairs, reconstruct, label and take one gradient step.
/// Ground-truth disparities are not an input.
pub fn adapt_online<T: Real>(
    params: &ErrorModelParams<T>,
    triple: &ImageTriple,
    matcher: &dyn Matcher,
    eta: T,
) -> Result<(ErrorModelParams<T>, Option<T>), ErrorModelError> {
    let obs = StereoObservation::compute(triple, matcher)?;
    adapt_on_observation(params, triple, &obs, eta)
}

/// Smallest `k` with `P(|e| <= k) >= sigma`; if only the open-ended top
/// class reaches `sigma`, the bound saturates at `d_max`.
pub fn quantile<T: Real>(dist: &[T], sigma: T, d_max: Disparity) -> Disparity {
    let tol = T::epsilon() * T::lit(4.0);
    let mut cum = T::zero();
    for (k, p) in dist.iter().enumerate().take(dist.len().saturating_sub(1)) {
        cum += *p;
        if cum >= sigma - tol {
            return k as Disparity;
        }
    }
    d_max
}

/// Candidate positions of a pixel's scene point given its measured
/// disparity and error bound `q`. Members are generated on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySet<T> {
    pub pixel: PixelCoord,
    pub d_hat: Disparity,
    pub measured: Point3<T>,
    lo: Disparity,
    hi: Disparity,
    pose: RobotPose<T>,
    ray: Point3<T>,
    focal_baseline: T,
}

impl<T: Real> UncertaintySet<T> {
    /// Smallest candidate disparity, at least 1.
    pub fn lower(&self) -> Disparity {
        self.lo
    }
    /// Largest candidate disparity, at most `d_max`.
    pub fn upper(&self) -> Disparity {
        self.hi
    }
    pub fn len(&self) -> usize {
        usize::from(self.hi - self.lo) + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn contains_disparity(&self, d: Disparity) -> bool {
        (self.lo..=self.hi).contains(&d)
    }

    /// World position at candidate disparity `xi`; identical to reprojecting the pixel at `xi`.
    pub fn member(&self, xi: Disparity) -> Point3<T> {
        let forward = self.focal_baseline / T::lit(f64::from(xi));
        transform(&self.pose, &self.ray.scale(forward))
    }

    /// `(xi, position)` for every `xi` in `[max(1, d_hat - q), min(d_max, d_hat + q)]`, ascending.
    pub fn members(&self) -> impl Iterator<Item = (Disparity, Point3<T>)> + '_ {
        (self.lo..=self.hi).map(move |xi| (xi, self.member(xi)))
    }
}

pub fn uncertainty_set<T: Real>(
    rig: &CameraRig<T>,
    pose: &RobotPose<T>,
    p: PixelCoord,
    d_hat: Disparity,
    q: Disparity,
) -> Result<UncertaintySet<T>, ErrorModelError> {
    if d_hat == 0 || d_hat > rig.d_max() {
        return Err(ErrorModelError::EmptySet);
    }
    let lo = d_hat.saturating_sub(q).max(1);
    let hi = d_hat.saturating_add(q).min(rig.d_max());
    if lo > hi {
        return Err(ErrorModelError::EmptySet);
    }
    let measured = pixel_position(pose, rig, p, d_hat)?;
    Ok(UncertaintySet {
        pixel: p,
        d_hat,
        measured,
        lo,
        hi,
        pose: *pose,
        ray: rig.ray(p),
        focal_baseline: rig.focal_baseline(),
    })
}

/// `max ||rho - rho_hat||` over the enumerated members.
pub fn epsilon_bound<T: Real>(set: &UncertaintySet<T>) -> T {
    set.members()
        .map(|(_, rho)| rho.distance(&set.measured))
        .fold(T::zero(), T::max)
}

/// Largest disparity in the set (closest possible point) and its position.
pub fn worst_case_disparity<T: Real>(set: &UncertaintySet<T>) -> (Disparity, Point3<T>) {
    (set.hi, set.member(set.hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fv(v: [f64; 6]) -> FeatureVector<f64> {
        FeatureVector(v)
    }

    fn random_frame(rng: &mut ChaCha8Rng, n: usize, classes: u16) -> TrainingFrame<f64> {
        let features = (0..n)
            .map(|_| {
                let mut x = [1.0; 6];
                for v in x.iter_mut().take(5) {
                    *v = rng.gen_range(-2.0..2.0);
                }
                FeatureVector(x)
            })
            .collect();
        let labels = (0..n).map(|_| Some(rng.gen_range(0..classes + 2))).collect();
        TrainingFrame::from_parts(features, labels).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, classes: usize) -> ErrorModelParams<f64> {
        let w = (0..6 * classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ErrorModelParams::from_weights(6, classes, w).unwrap()
    }

    #[test]
    fn flat_image_features() {
        let img = GrayImage::from_fn(20, 10, |_, _| 77);
        let d = DisparityMap::filled(20, 10, 8, 0);
        let x: FeatureVector<f64> = extract_features(&img, &img, &d, PixelCoord::new(5, 5)).unwrap();
        assert_eq!(x.0[0], 0.0);
        assert_eq!(x.0[1], 0.0);
        assert_eq!(x.0[2], FEATURE_SCALING.census.offset);
        assert_eq!(x.0[3], FEATURE_SCALING.discrepancy.offset);
        assert_eq!(x.bias(), 1.0);
        let again: FeatureVector<f64> = extract_features(&img, &img, &d, PixelCoord::new(5, 5)).unwrap();
        assert_eq!(x, again);
    }

    #[test]
    fn checker_gradient_exceeds_flat() {
        let checker = GrayImage::from_fn(20, 10, |u, v| if (u / 2 + v / 2) % 2 == 0 { 40 } else { 200 });
        let flat = GrayImage::from_fn(20, 10, |_, _| 120);
        let d = DisparityMap::filled(20, 10, 8, 0);
        let p = PixelCoord::new(9, 5);
        let a: FeatureVector<f64> = extract_features(&checker, &checker, &d, p).unwrap();
        let b: FeatureVector<f64> = extract_features(&flat, &flat, &d, p).unwrap();
        assert!(a.0[0] > b.0[0]);
        assert!(a.0[1] > b.0[1]);
        assert!(extract_features::<f64>(&flat, &flat, &d, PixelCoord::new(20, 0)).is_err());
    }

    #[test]
    fn predict_examples() {
        let p = ErrorModelParams::<f64>::default().predict(&fv([0.3, 1.0, 2.0, 0.0, 1.0, 1.0]));
        for x in p.probs() {
            assert_abs_diff_eq!(*x, 0.2, epsilon = 1e-15);
        }
        let mut big = ErrorModelParams::<f64>::zeros(6, 3);
        big.set_weight(5, 1, 1e4);
        let p = big.predict(&fv([0.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
        assert!(p.probs().iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(p.probs()[1], 1.0, epsilon = 1e-12);
        let mut m = ErrorModelParams::<f64>::zeros(6, 3);
        m.set_weight(5, 1, 2f64.ln());
        m.set_weight(5, 2, 2f64.ln());
        let p = m.predict(&fv([0.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
        assert_abs_diff_eq!(p.probs()[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(p.probs()[1], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(p.probs()[2], 0.4, epsilon = 1e-12);
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame = random_frame(&mut rng, 12, 5);
        let l = loss(&ErrorModelParams::default(), &frame).unwrap();
        assert_abs_diff_eq!(l, 5f64.ln(), epsilon = 1e-12);

        // Two pixels with classes 0 and 1 under a uniform two-class model.
        let frame = TrainingFrame::from_parts(
            vec![fv([1.0, 0.0, 0.0, 0.0, 0.0, 1.0]), fv([0.0, 2.0, 0.0, 0.0, 0.0, 1.0])],
            vec![Some(0), Some(1)],
        )
        .unwrap();
        assert_abs_diff_eq!(loss(&ErrorModelParams::zeros(6, 2), &frame).unwrap(), 2f64.ln(), epsilon = 1e-15);

        // Near one-hot predictions with logit magnitude 20.
        let mut sharp = ErrorModelParams::<f64>::zeros(6, 2);
        sharp.set_weight(0, 0, 20.0);
        sharp.set_weight(1, 1, 10.0);
        assert!(loss(&sharp, &frame).unwrap() <= 1e-6);

        let none = TrainingFrame::from_parts(vec![fv([1.0; 6])], vec![None]).unwrap();
        assert!(matches!(loss(&ErrorModelParams::<f64>::default(), &none), Err(ErrorModelError::NoValidPixels)));
        assert!(sgd_step(&ErrorModelParams::<f64>::default(), &none, 0.1).is_err());
    }

    /// Central finite differences of the loss, independent of the analytic gradient.
    fn numeric_gradient(params: &ErrorModelParams<f64>, frame: &TrainingFrame<f64>, h: f64) -> Vec<f64> {
        (0..params.weights().len())
            .map(|i| {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.weights[i] += h;
                minus.weights[i] -= h;
                (loss(&plus, frame).unwrap() - loss(&minus, frame).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-3);
        a.iter().zip(b).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
    }

    #[test]
    fn gradient_at_zero_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frame = random_frame(&mut rng, 8, 5);
        let params = ErrorModelParams::<f64>::default();
        let (_, g) = loss_and_gradient(&params, &frame).unwrap();
        assert!(max_relative_error(&g, &numeric_gradient(&params, &frame, 1e-5)) <= 1e-5);
    }

    #[test]
    fn zero_step_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frame = random_frame(&mut rng, 8, 5);
        let params = random_params(&mut rng, 5);
        assert_eq!(sgd_step(&params, &frame, 0.0).unwrap(), params);
    }

    #[test]
    fn repeated_steps_do_not_increase_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frame = random_frame(&mut rng, 64, 5);
        let mut params = ErrorModelParams::<f64>::default();
        let mut last = loss(&params, &frame).unwrap();
        for _ in 0..300 {
            params = sgd_step(&params, &frame, 1e-2).unwrap();
            let l = loss(&params, &frame).unwrap();
            assert!(l <= last + 1e-12, "{l} > {last}");
            last = l;
        }
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile(&[0.95, 0.04, 0.01], 0.99, 48), 1);
        assert_eq!(quantile(&[0.9, 0.0, 0.1], 1.0, 48), 48);
        assert_eq!(quantile(&[1.0, 0.0, 0.0], 0.5, 48), 0);
        assert_eq!(quantile(&[1.0, 0.0, 0.0], 1.0, 48), 0);
        assert_eq!(quantile(&[0.5, 0.2, 0.3], 0.6, 48), 1);
        assert_eq!(quantile(&[0.5, 0.2, 0.3], 0.75, 48), 48);
    }

    fn rig() -> CameraRig<f64> {
        CameraRig::new(100.0, 0.1, (80.0, 60.0), 160, 120, 48).unwrap()
    }

    #[test]
    fn uncertainty_set_examples() {
        let pose = RobotPose::origin();
        let p = PixelCoord::new(80, 60);
        let s = uncertainty_set(&rig(), &pose, p, 10, 0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.members().next().unwrap().1, s.measured);
        assert_eq!(s.member(10), pixel_position(&pose, &rig(), p, 10).unwrap());
        assert_eq!(epsilon_bound(&s), 0.0);
        let s = uncertainty_set(&rig(), &pose, p, 10, 1).unwrap();
        assert_eq!(s.members().map(|m| m.0).collect::<Vec<_>>(), vec![9, 10, 11]);
        let s = uncertainty_set(&rig(), &pose, p, 1, 3).unwrap();
        assert_eq!(s.members().map(|m| m.0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert!(uncertainty_set(&rig(), &pose, p, 0, 0).is_err());
    }

    #[test]
    fn epsilon_and_worst_case() {
        let pose = RobotPose::origin();
        let p = PixelCoord::new(80, 60);
        let s1 = uncertainty_set(&rig(), &pose, p, 10, 1).unwrap();
        assert_abs_diff_eq!(epsilon_bound(&s1), 10.0 * (1.0 / 9.0 - 1.0 / 10.0), epsilon = 1e-12);
        let s2 = uncertainty_set(&rig(), &pose, p, 10, 2).unwrap();
        assert!(epsilon_bound(&s2) >= epsilon_bound(&s1));
        let (d, rho) = worst_case_disparity(&s1);
        assert_eq!(d, 11);
        assert_abs_diff_eq!(rho.x, 10.0 / 11.0, epsilon = 1e-12);
        let s0 = uncertainty_set(&rig(), &pose, p, 10, 0).unwrap();
        assert_eq!(worst_case_disparity(&s0).0, 10);
        let top = uncertainty_set(&rig(), &pose, p, 48, 3).unwrap();
        assert_eq!(worst_case_disparity(&top).0, 48);
    }

    #[test]
    fn model_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = random_params(&mut rng, 5);
        let mut buf = Vec::new();
        params.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SCEM");
        assert_eq!(buf.len(), 16 + 8 * 30);
        assert_eq!(ErrorModelParams::<f64>::read_from(&buf[..]).unwrap(), params);
        buf[4] = 9;
        assert!(ErrorModelParams::<f64>::read_from(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn predict_sums_to_one(w in prop::collection::vec(-30.0f64..30.0, 30), x in prop::array::uniform5(-10.0f64..10.0)) {
            let params = ErrorModelParams::from_weights(6, 5, w).unwrap();
            let f = FeatureVector([x[0], x[1], x[2], x[3], x[4], 1.0]);
            let p = params.predict(&f);
            let s: f64 = p.probs().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            prop_assert!(p.probs().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn gradient_matches_finite_differences(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frame = random_frame(&mut rng, 8, 5);
            let params = random_params(&mut rng, 5);
            let (_, g) = loss_and_gradient(&params, &frame).unwrap();
            prop_assert!(max_relative_error(&g, &numeric_gradient(&params, &frame, 1e-5)) <= 1e-5);
        }

        #[test]
        fn quantile_monotone_in_sigma(raw in prop::collection::vec(0.0f64..1.0, 5), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantile(&p, lo, 48) <= quantile(&p, hi, 48));
        }

        #[test]
        fn epsilon_dominates_members(u in 0usize..160, v in 0usize..120, d in 1u16..=48, q in 0u16..10) {
            let s = uncertainty_set(&rig(), &RobotPose::new(0.3, -0.2, 0.7), PixelCoord::new(u, v), d, q).unwrap();
            let eps = epsilon_bound(&s);
            prop_assert!(s.contains_disparity(d));
            for (_, rho) in s.members() {
                prop_assert!(rho.distance(&s.measured) <= eps);
            }
        }
    }
}
