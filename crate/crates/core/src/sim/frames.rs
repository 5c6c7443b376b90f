//! Random scene generators and on-disk trinocular frame fixtures.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{CameraRig, Point3, RobotPose};
use crate::image::GrayImage;
use crate::scene::{render_triple, GroundTruth, ImageTriple, Obstacle, Scene, Shape, TextureSpec};

use super::SimError;

/// Fronto-parallel panels whose depths sit on the lattice `f b / (2k)`, so
/// that wide- and narrow-baseline ground-truth disparities are exact
/// integers (`2k` and `k`). The backdrop is on the lattice as well.
pub fn lattice_scene(rig: &CameraRig<f64>, rng: &mut ChaCha8Rng) -> Scene {
    let fb = rig.focal_baseline();
    let k_max = rig.d_max() / 2;
    let depth_of = |k: u16| fb / (2.0 * f64::from(k));
    let n = rng.gen_range(2..=6);
    let obstacles = (0..n)
        .map(|_| {
            let k = rng.gen_range(3.max(k_max / 6)..=k_max);
            let depth = depth_of(k);
            let half_fov = 0.5 * rig.width() as f64 / rig.focal_length_px();
            let y = rng.gen_range(-0.8..0.8) * half_fov * depth;
            let z = rng.gen_range(-0.5..0.5) * half_fov * depth;
            let hw = rng.gen_range(0.1..0.5) * half_fov * depth;
            let hh = rng.gen_range(0.1..0.5) * half_fov * depth;
            Obstacle {
                shape: Shape::fronto_panel(Point3::new(depth, y, z), hw, hh),
                texture: TextureSpec::value_noise(rng.gen_range(0.01..0.05) * depth, rng.gen(), 0.6, 128.0),
            }
        })
        .collect();
    let k_bg = rng.gen_range(1..=2u16);
    let background = TextureSpec::value_noise(0.1, rng.gen(), 0.5, 110.0);
    Scene::new(obstacles, depth_of(k_bg), background).expect("generated scene is valid")
}

/// Texture families for generated training frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureFamily {
    /// Low-contrast checkerboards.
    Checker,
    /// High-contrast value noise.
    Noise,
}

impl FromStr for TextureFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "checker" => Ok(Self::Checker),
            "noise" => Ok(Self::Noise),
            other => Err(format!("unknown texture family `{other}` (expected checker or noise)")),
        }
    }
}

impl TextureFamily {
    fn texture(self, rng: &mut ChaCha8Rng) -> TextureSpec {
        match self {
            TextureFamily::Checker => {
                TextureSpec::checker(rng.gen_range(0.04..0.08), rng.gen_range(0.1..0.4), rng.gen_range(90.0..160.0))
            }
            TextureFamily::Noise => {
                TextureSpec::value_noise(rng.gen_range(0.02..0.05), rng.gen(), rng.gen_range(0.4..0.8), 128.0)
            }
        }
    }
}

/// A cluttered scene of spheres and panels textured from `family`, viewed from the origin.
pub fn family_scene(family: TextureFamily, rng: &mut ChaCha8Rng) -> Scene {
    let n = rng.gen_range(1..=4);
    let obstacles = (0..n)
        .map(|_| {
            let x = rng.gen_range(0.4..2.0);
            let y = rng.gen_range(-0.4..0.4) * x;
            let z = rng.gen_range(-0.2..0.2) * x;
            let shape = if rng.gen_bool(0.5) {
                Shape::Sphere { center: Point3::new(x, y, z), radius: rng.gen_range(0.1..0.4) }
            } else {
                Shape::fronto_panel(Point3::new(x, y, z), rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5))
            };
            Obstacle { shape, texture: family.texture(rng) }
        })
        .collect();
    let background = family.texture(rng);
    Scene::new(obstacles, rng.gen_range(3.0..6.0), background).expect("generated scene is valid")
}

pub fn render_family_frames(
    family: TextureFamily,
    count: usize,
    seed: u64,
    rig: &CameraRig<f64>,
) -> Vec<(ImageTriple, GroundTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let scene = family_scene(family, &mut rng);
            render_triple(&scene, &RobotPose::origin(), rig)
        })
        .collect()
}

/// Writes `<stem>_1.pgm`, `<stem>_2.pgm`, `<stem>_3.pgm`.
pub fn save_frame(dir: &Path, stem: &str, triple: &ImageTriple) -> std::io::Result<()> {
    triple.left.save_pgm(dir.join(format!("{stem}_1.pgm")))?;
    triple.center.save_pgm(dir.join(format!("{stem}_2.pgm")))?;
    triple.right.save_pgm(dir.join(format!("{stem}_3.pgm")))
}

/// Loads every complete `<stem>_{1,2,3}.pgm` triple in `dir`, ordered by stem.
pub fn load_frames(dir: &Path) -> Result<Vec<(String, ImageTriple)>, SimError> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_1.pgm")).map(str::to_owned))
        .collect();
    stems.sort();
    let load = |stem: &str, k: usize| -> Result<GrayImage, SimError> {
        let path = dir.join(format!("{stem}_{k}.pgm"));
        GrayImage::load_pgm(&path).map_err(|e| SimError::Invalid(format!("{}: {e}", path.display())))
    };
    stems
        .into_iter()
        .map(|stem| {
            let triple = ImageTriple { left: load(&stem, 1)?, center: load(&stem, 2)?, right: load(&stem, 3)? };
            Ok((stem, triple))
        })
        .collect()
}
