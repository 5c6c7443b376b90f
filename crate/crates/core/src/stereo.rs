//! Integer block matching and trinocular disparity reconstruction.
//!
//! Disparities are indexed by the left image of a pair. A scene point at
//! column `u` of the left image appears at column `u - d` of the right image,
//! so the centre-camera pixel matching `(u, v)` in `I1` is `(u - d12, v)`.

use std::io::{self, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::Disparity;
use crate::image::GrayImage;

/// Marker for pixels without a reliable disparity.
pub const INVALID: u16 = u16::MAX;

const DISPARITY_MAGIC: &[u8; 4] = b"DSP1";

#[derive(Debug, Error)]
pub enum StereoError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("invalid match config: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed disparity file: {0}")]
    Format(String),
}

/// `W x H` grid of disparities in `0..=d_max`, or [`INVALID`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    d_max: Disparity,
    values: Vec<u16>,
}

impl DisparityMap {
    pub fn invalid(width: usize, height: usize, d_max: Disparity) -> Self {
        Self { width, height, d_max, values: vec![INVALID; width * height] }
    }

    pub fn filled(width: usize, height: usize, d_max: Disparity, d: Disparity) -> Self {
        assert!(d <= d_max, "disparity {d} above d_max {d_max}");
        Self { width, height, d_max, values: vec![d; width * height] }
    }

    /// Builds a map from raw values; entries above `d_max` other than
    /// [`INVALID`] are rejected.
    pub fn from_raw(
        width: usize,
        height: usize,
        d_max: Disparity,
        values: Vec<u16>,
    ) -> Result<Self, StereoError> {
        if values.len() != width * height {
            return Err(StereoError::Format(format!(
                "expected {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|&&d| d != INVALID && d > d_max) {
            return Err(StereoError::Format(format!("value {bad} above d_max {d_max}")));
        }
        Ok(Self { width, height, d_max, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn d_max(&self) -> Disparity {
        self.d_max
    }
    pub fn as_raw(&self) -> &[u16] {
        &self.values
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<Disparity> {
        match self.values[v * self.width + u] {
            INVALID => None,
            d => Some(d),
        }
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, d: Option<Disparity>) {
        let value = match d {
            Some(d) => d.min(self.d_max),
            None => INVALID,
        };
        self.values[v * self.width + u] = value;
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&d| d != INVALID).count()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(DISPARITY_MAGIC)?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&self.d_max.to_le_bytes())?;
        for d in &self.values {
            w.write_all(&d.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, StereoError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DISPARITY_MAGIC {
            return Err(StereoError::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let width = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let height = u32::from_le_bytes(b4) as usize;
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let d_max = u16::from_le_bytes(b2);
        let mut bytes = vec![0u8; width * height * 2];
        r.read_exact(&mut bytes)?;
        let values = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        Self::from_raw(width, height, d_max, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StereoError> {
        Self::read_from(io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub window_radius: usize,
    pub d_max: Disparity,
    /// The runner-up cost (at least two disparities away from the winner)
    /// must exceed `uniqueness_ratio * best`. `1.0` disables the gate.
    pub uniqueness_ratio: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { window_radius: 3, d_max: 48, uniqueness_ratio: 1.15 }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), StereoError> {
        if self.window_radius < 1 {
            return Err(StereoError::InvalidConfig("window_radius must be >= 1".into()));
        }
        if !(self.uniqueness_ratio >= 1.0) {
            return Err(StereoError::InvalidConfig("uniqueness_ratio must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which two cameras of the trinocular rig a disparity map relates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CameraPair {
    LeftCenter,
    CenterRight,
    LeftRight,
}

/// Black-box disparity estimator.
pub trait Matcher: Sync {
    fn disparity(
        &self,
        pair: CameraPair,
        left: &GrayImage,
        right: &GrayImage,
    ) -> Result<DisparityMap, StereoError>;
}

/// SAD winner-take-all block matcher.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BlockMatcher {
    pub config: MatchConfig,
}

impl BlockMatcher {
    pub fn new(config: MatchConfig) -> Self {
        Self { config }
    }
}

impl Matcher for BlockMatcher {
    fn disparity(
        &self,
        _pair: CameraPair,
        left: &GrayImage,
        right: &GrayImage,
    ) -> Result<DisparityMap, StereoError> {
        match_pair(left, right, &self.config)
    }
}

/// Winner-take-all SAD block matching of `left` against `right`.
pub fn match_pair(
    left: &GrayImage,
    right: &GrayImage,
    cfg: &MatchConfig,
) -> Result<DisparityMap, StereoError> {
    if left.dims() != right.dims() {
        return Err(StereoError::DimensionMismatch(left.dims(), right.dims()));
    }
    cfg.validate()?;
    let (w, h) = left.dims();
    let r = cfg.window_radius;
    let d_max = usize::from(cfg.d_max);
    let mut out = DisparityMap::invalid(w, h, cfg.d_max);
    if w <= 2 * r || h <= 2 * r {
        return Ok(out);
    }
    let l = left.as_raw();
    let rr = right.as_raw();
    let n_d = d_max + 1;
    const BAND: usize = 16;

    out.values.par_chunks_mut(w * BAND).enumerate().for_each(|(bi, chunk)| {
        let v0 = bi * BAND;
        let lo = v0.max(r);
        let hi = (v0 + chunk.len() / w).min(h - r);
        if lo >= hi {
            return;
        }
        let rows = hi - lo + 2 * r;
        // Absolute differences for one disparity over rows [lo - r, hi + r).
        let mut ad = vec![0u32; rows * w];
        let mut col = vec![0u32; w];
        // cost[(j * w + u) * n_d + d] for row lo + j, u32::MAX where the candidate leaves the image
        let mut cost = vec![u32::MAX; (hi - lo) * w * n_d];
        for d in 0..n_d {
            // Window on the left spans [u - r, u + r]; on the right [u - d - r, u - d + r].
            let first = d + r;
            if first + r >= w {
                break;
            }
            for k in 0..rows {
                let base = (lo - r + k) * w;
                let (a, b) = (&l[base..base + w], &rr[base..base + w]);
                let dst = &mut ad[k * w..(k + 1) * w];
                for u in d..w {
                    dst[u] = u32::from(a[u].abs_diff(b[u - d]));
                }
            }
            col[d..].fill(0);
            for k in 0..=2 * r {
                for u in d..w {
                    col[u] += ad[k * w + u];
                }
            }
            for j in 0..hi - lo {
                if j > 0 {
                    let (add, sub) = ((j + 2 * r) * w, (j - 1) * w);
                    for u in d..w {
                        col[u] = col[u] + ad[add + u] - ad[sub + u];
                    }
                }
                let mut acc: u32 = col[first - r..=first + r].iter().sum();
                cost[(j * w + first) * n_d + d] = acc;
                for u in first + 1..w - r {
                    acc = acc + col[u + r] - col[u - r - 1];
                    cost[(j * w + u) * n_d + d] = acc;
                }
            }
        }
        for j in 0..hi - lo {
            let row = &mut chunk[(lo + j - v0) * w..(lo + j - v0 + 1) * w];
            for u in r..w - r {
                let c = &cost[(j * w + u) * n_d..(j * w + u + 1) * n_d];
                let mut best = u32::MAX;
                let mut best_d = usize::MAX;
                for (d, &x) in c.iter().enumerate() {
                    if x < best {
                        best = x;
                        best_d = d;
                    }
                }
                if best_d == usize::MAX {
                    continue;
                }
                if cfg.uniqueness_ratio > 1.0 {
                    let second = c
                        .iter()
                        .enumerate()
                        .filter(|&(d, &x)| d.abs_diff(best_d) >= 2 && x != u32::MAX)
                        .map(|(_, &x)| x)
                        .min();
                    // Without a runner-up the match cannot be shown to be unique.
                    match second {
                        Some(second) if f64::from(second) > cfg.uniqueness_ratio * f64::from(best) => {}
                        _ => continue,
                    }
                }
                row[u] = best_d as u16;
            }
        }
    });
    Ok(out)
}

/// Composes narrow-baseline maps into a wide-baseline prediction:
/// `d13(u, v) = d12(u, v) + d23(u - d12(u, v), v)`.
pub fn reconstruct(d12: &DisparityMap, d23: &DisparityMap) -> Result<DisparityMap, StereoError> {
    if d12.dims() != d23.dims() {
        return Err(StereoError::DimensionMismatch(d12.dims(), d23.dims()));
    }
    let (w, h) = d12.dims();
    let d_max = d12.d_max.max(d23.d_max);
    let mut out = DisparityMap::invalid(w, h, d_max);
    for v in 0..h {
        for u in 0..w {
            let Some(a) = d12.get(u, v) else { continue };
            let Some(u_hat) = u.checked_sub(usize::from(a)) else { continue };
            let Some(b) = d23.get(u_hat, v) else { continue };
            out.set(u, v, Some((a + b).min(d_max)));
        }
    }
    Ok(out)
}

/// Per-pixel absolute disparity discrepancy, [`INVALID`] where either input is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMap {
    width: usize,
    height: usize,
    values: Vec<u16>,
}

impl ErrorMap {
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<u16> {
        match self.values[v * self.width + u] {
            INVALID => None,
            e => Some(e),
        }
    }
    pub fn as_raw(&self) -> &[u16] {
        &self.values
    }
    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&e| e != INVALID).count()
    }
}

pub fn reconstruction_error(
    d13_hat: &DisparityMap,
    d13_bar: &DisparityMap,
) -> Result<ErrorMap, StereoError> {
    if d13_hat.dims() != d13_bar.dims() {
        return Err(StereoError::DimensionMismatch(d13_hat.dims(), d13_bar.dims()));
    }
    let values = d13_hat
        .values
        .iter()
        .zip(&d13_bar.values)
        .map(|(&a, &b)| if a == INVALID || b == INVALID { INVALID } else { a.abs_diff(b) })
        .collect();
    Ok(ErrorMap { width: d13_hat.width, height: d13_hat.height, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h).map(|_| rng.gen::<u8>()).collect();
        GrayImage::from_raw(w, h, data).unwrap()
    }

    /// `right(u) = left(u + shift)`: a left-image pixel moves `shift` columns left.
    fn shifted(img: &GrayImage, shift: usize) -> GrayImage {
        GrayImage::from_fn(img.width(), img.height(), |u, v| {
            img.get((u + shift).min(img.width() - 1), v)
        })
    }

    #[test]
    fn recovers_constructed_shift() {
        let left = noise_image(64, 32, 1);
        let right = shifted(&left, 7);
        let cfg = MatchConfig { window_radius: 2, d_max: 12, uniqueness_ratio: 1.1 };
        let d = match_pair(&left, &right, &cfg).unwrap();
        let mut checked = 0;
        for v in 2..30 {
            for u in 7 + 2..64 - 2 - 7 {
                assert_eq!(d.get(u, v), Some(7), "at ({u},{v})");
                checked += 1;
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn flat_images() {
        let flat = GrayImage::from_fn(40, 20, |_, _| 100);
        let gated = MatchConfig { window_radius: 2, d_max: 8, uniqueness_ratio: 1.2 };
        assert_eq!(match_pair(&flat, &flat, &gated).unwrap().valid_count(), 0);
        let open = MatchConfig { uniqueness_ratio: 1.0, ..gated };
        let d = match_pair(&flat, &flat, &open).unwrap();
        for v in 2..18 {
            for u in 2..38 {
                assert_eq!(d.get(u, v), Some(0));
            }
        }
    }

    #[test]
    fn border_pixels_invalid_and_candidates_skipped() {
        let left = noise_image(48, 24, 2);
        let right = shifted(&left, 5);
        let cfg = MatchConfig { window_radius: 3, d_max: 10, uniqueness_ratio: 1.0 };
        let d = match_pair(&left, &right, &cfg).unwrap();
        for v in 0..24 {
            for u in 0..3 {
                assert_eq!(d.get(u, v), None);
            }
        }
        // At u = 4 only candidates d <= 1 keep the right window inside the image.
        for v in 3..21 {
            assert!(d.get(4, v).unwrap() <= 1);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let a = GrayImage::new(10, 10);
        let b = GrayImage::new(11, 10);
        assert!(matches!(
            match_pair(&a, &b, &MatchConfig::default()),
            Err(StereoError::DimensionMismatch(..))
        ));
        let m1 = DisparityMap::invalid(3, 3, 5);
        let m2 = DisparityMap::invalid(3, 4, 5);
        assert!(reconstruct(&m1, &m2).is_err());
        assert!(reconstruction_error(&m1, &m2).is_err());
    }

    #[test]
    fn reconstruct_constant_maps() {
        let d12 = DisparityMap::filled(10, 3, 20, 2);
        let d23 = DisparityMap::filled(10, 3, 20, 3);
        let d13 = reconstruct(&d12, &d23).unwrap();
        for v in 0..3 {
            assert_eq!(d13.get(0, v), None);
            assert_eq!(d13.get(1, v), None);
            for u in 2..10 {
                assert_eq!(d13.get(u, v), Some(5));
            }
        }
        let z = DisparityMap::filled(10, 3, 20, 0);
        assert!(reconstruct(&z, &z).unwrap().as_raw().iter().all(|&d| d == 0));
    }

    #[test]
    fn reconstruct_uses_shifted_lookup() {
        let mut d12 = DisparityMap::filled(8, 1, 20, 1);
        let mut d23 = DisparityMap::invalid(8, 1, 20);
        d12.set(5, 0, Some(3));
        d23.set(2, 0, Some(4));
        d23.set(4, 0, Some(9));
        let d13 = reconstruct(&d12, &d23).unwrap();
        assert_eq!(d13.get(5, 0), Some(7));
        assert_eq!(d13.get(5 - 1, 0), None);
        d12.set(6, 0, None);
        assert_eq!(reconstruct(&d12, &d23).unwrap().get(6, 0), None);
    }

    #[test]
    fn reconstruct_clamps_to_d_max() {
        let d12 = DisparityMap::filled(30, 1, 10, 8);
        let d23 = DisparityMap::filled(30, 1, 10, 7);
        assert_eq!(reconstruct(&d12, &d23).unwrap().get(20, 0), Some(10));
    }

    #[test]
    fn reconstruction_error_rules() {
        let mut a = DisparityMap::filled(4, 1, 20, 10);
        let mut b = DisparityMap::filled(4, 1, 20, 7);
        b.set(1, 0, None);
        a.set(2, 0, None);
        let e = reconstruction_error(&a, &b).unwrap();
        assert_eq!(e.get(0, 0), Some(3));
        assert_eq!(e.get(1, 0), None);
        assert_eq!(e.get(2, 0), None);
        assert_eq!(e.valid_count(), 2);
        let same = reconstruction_error(&a, &a).unwrap();
        assert!(same.as_raw().iter().all(|&x| x == 0 || x == INVALID));
    }

    #[test]
    fn disparity_file_round_trip() {
        let mut m = DisparityMap::filled(5, 3, 48, 12);
        m.set(0, 0, None);
        m.set(4, 2, Some(48));
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DSP1");
        assert_eq!(buf.len(), 4 + 4 + 4 + 2 + 2 * 15);
        assert_eq!(&buf[14..16], &[0xFF, 0xFF]);
        assert_eq!(DisparityMap::read_from(&buf[..]).unwrap(), m);
        buf[0] = b'X';
        assert!(DisparityMap::read_from(&buf[..]).is_err());
    }

    fn brute_force(left: &GrayImage, right: &GrayImage, cfg: &MatchConfig) -> Vec<Option<Disparity>> {
        let (w, h) = left.dims();
        let r = cfg.window_radius as isize;
        let mut out = vec![None; w * h];
        for v in r..h as isize - r {
            for u in r..w as isize - r {
                let costs: Vec<Option<u32>> = (0..=cfg.d_max as isize)
                    .map(|d| {
                        (u - d - r >= 0).then(|| {
                            let mut s = 0u32;
                            for dv in -r..=r {
                                for du in -r..=r {
                                    let a = left.get((u + du) as usize, (v + dv) as usize);
                                    let b = right.get((u + du - d) as usize, (v + dv) as usize);
                                    s += u32::from(a.abs_diff(b));
                                }
                            }
                            s
                        })
                    })
                    .collect();
                let Some((best_d, best)) = costs
                    .iter()
                    .enumerate()
                    .filter_map(|(d, c)| c.map(|c| (d, c)))
                    .min_by_key(|&(d, c)| (c, d))
                else {
                    continue;
                };
                if cfg.uniqueness_ratio > 1.0 {
                    let second = costs
                        .iter()
                        .enumerate()
                        .filter_map(|(d, c)| c.filter(|_| d.abs_diff(best_d) >= 2))
                        .min();
                    if !second.is_some_and(|s| f64::from(s) > cfg.uniqueness_ratio * f64::from(best)) {
                        continue;
                    }
                }
                out[v as usize * w + u as usize] = Some(best_d as Disparity);
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn matches_brute_force_window_sums(
            seed in 0u64..1000,
            w in 9usize..40,
            h in 7usize..45,
            r in 1usize..4,
            d_max in 1u16..20,
            ratio in prop_oneof![Just(1.0), Just(1.15)],
        ) {
            let left = noise_image(w, h, seed);
            let right = shifted(&noise_image(w, h, seed), 3);
            let cfg = MatchConfig { window_radius: r, d_max, uniqueness_ratio: ratio };
            let fast = match_pair(&left, &right, &cfg).unwrap();
            let fast: Vec<_> = (0..h).flat_map(|v| (0..w).map(move |u| (u, v))).map(|(u, v)| fast.get(u, v)).collect();
            prop_assert_eq!(fast, brute_force(&left, &right, &cfg));
        }

        #[test]
        fn translation_consistent(seed in 0u64..1000, du in 0usize..6, dv in 0usize..6, shift in 1usize..6) {
            let (w, h) = (56, 28);
            let base = noise_image(w + 8, h + 8, seed);
            let base_right = shifted(&base, shift);
            let crop = |img: &GrayImage, ou: usize, ov: usize| {
                GrayImage::from_fn(w, h, |u, v| img.get(u + ou, v + ov))
            };
            let cfg = MatchConfig { window_radius: 2, d_max: 8, uniqueness_ratio: 1.1 };
            let a = match_pair(&crop(&base, 6, 6), &crop(&base_right, 6, 6), &cfg).unwrap();
            let b = match_pair(&crop(&base, 6 - du, 6 - dv), &crop(&base_right, 6 - du, 6 - dv), &cfg).unwrap();
            // Pixels whose full candidate range stays inside both crops must agree.
            for v in 2..h - 2 - dv {
                for u in 2 + 8..w - 2 - du {
                    prop_assert_eq!(a.get(u, v), b.get(u + du, v + dv));
                }
            }
        }

        #[test]
        fn self_error_is_zero(vals in prop::collection::vec(prop_oneof![0u16..=30, Just(INVALID)], 24)) {
            let m = DisparityMap::from_raw(6, 4, 30, vals).unwrap();
            let e = reconstruction_error(&m, &m).unwrap();
            for (x, d) in e.as_raw().iter().zip(m.as_raw()) {
                prop_assert_eq!(*x == INVALID, *d == INVALID);
                if *d != INVALID { prop_assert_eq!(*x, 0); }
            }
        }
    }
}
