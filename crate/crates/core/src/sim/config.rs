//! Line-based `key = value` experiment configuration.
//!
//! Blank lines and text after `#` are ignored. Scene primitives use indexed
//! keys such as `obstacle.0.kind = sphere`. Vectors are whitespace-separated.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::geometry::{CameraRig, Point3};
use crate::safety::BarrierConfig;
use crate::scene::{CorruptionSpec, Obstacle, Region, Scene, Shape, TextureSpec};
use crate::stereo::MatchConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{file}: cannot read: {source}")]
    Io { file: String, source: std::io::Error },
    #[error("{file}:{line}: expected `key = value`")]
    Syntax { file: String, line: usize },
    #[error("{file}:{line}: duplicate key `{key}`")]
    Duplicate { file: String, line: usize, key: String },
    #[error("{file}: field `{key}`: {reason}")]
    Field { file: String, key: String, reason: String },
    #[error("{file}: unknown key `{key}`")]
    UnknownKey { file: String, key: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Naive,
    RobustPretrained,
    RobustOnline,
    /// Error bounds taken from ground truth, isolating filter correctness from the learner.
    RobustOracle,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Naive, Mode::RobustPretrained, Mode::RobustOnline, Mode::RobustOracle];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Naive => "naive",
            Mode::RobustPretrained => "robust-pretrained",
            Mode::RobustOnline => "robust-online",
            Mode::RobustOracle => "robust-oracle",
        }
    }

    pub fn is_robust(self) -> bool {
        self != Mode::Naive
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Mode::RobustPretrained | Mode::RobustOnline)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected naive, robust-pretrained, robust-online or robust-oracle)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub rig: CameraRig<f64>,
    pub matching: MatchConfig,
    pub barrier: BarrierConfig<f64>,
    pub dt_dynamics: f64,
    pub control_rate_hz: f64,
    pub duration_s: f64,
    pub v_des: f64,
    pub omega_des: f64,
    pub start_distance: f64,
    pub mode: Mode,
    pub eta: f64,
    pub seed: u64,
    pub scene: Scene,
    pub corruption: Option<CorruptionSpec>,
}

impl SimConfig {
    /// Control period in dynamics substeps.
    pub fn substeps(&self) -> usize {
        ((1.0 / self.control_rate_hz) / self.dt_dynamics).round().max(1.0) as usize
    }

    pub fn control_steps(&self) -> usize {
        (self.duration_s * self.control_rate_hz).round() as usize
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let file = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { file: file.clone(), source })?;
        Self::parse(&text, &file)
    }

    pub fn parse(text: &str, file: &str) -> Result<Self, ConfigError> {
        let mut kv = Entries::parse(text, file)?;
        let cfg = Self::from_entries(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    fn from_entries(kv: &mut Entries) -> Result<Self, ConfigError> {
        let f = kv.get_or("focal_length_px", 100.0)?;
        let b = kv.get_or("baseline_m", 0.12)?;
        let width = kv.get_or("width", 160usize)?;
        let height = kv.get_or("height", 120usize)?;
        let d_max = kv.get_or("d_max", 48u16)?;
        let rig = CameraRig::centered(f, b, width, height, d_max).map_err(|e| kv.field("focal_length_px", e))?;

        let matching = MatchConfig {
            window_radius: kv.get_or("window_radius", 3usize)?,
            d_max,
            uniqueness_ratio: kv.get_or("uniqueness_ratio", 1.15)?,
        };
        matching.validate().map_err(|e| kv.field("window_radius", e))?;

        let barrier = BarrierConfig {
            c: kv.get_or("c", 0.33)?,
            alpha: kv.get_or("alpha", 1.0)?,
            delta: kv.get_or("delta", 0.0)?,
            max_constraints: kv.get_or("max_constraints", 4000usize)?,
            sigma: kv.get_or("sigma", 0.99)?,
            u_max: kv.get_or("u_max", 1.0)?,
            ..BarrierConfig::default()
        };
        barrier.validate().map_err(|e| kv.field("c", e))?;

        let dt_dynamics: f64 = kv.get_or("dt_dynamics", 0.005)?;
        let control_rate_hz = kv.get_or("control_rate_hz", 10.0)?;
        let duration_s = kv.get_or("duration_s", 60.0)?;
        for (key, x) in [("dt_dynamics", dt_dynamics), ("control_rate_hz", control_rate_hz), ("duration_s", duration_s)] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(kv.field(key, "must be positive"));
            }
        }
        if dt_dynamics > 1.0 / control_rate_hz {
            return Err(kv.field("dt_dynamics", "must not exceed the control period"));
        }
        let v_des = kv.get_or("v_des", 0.2)?;
        let omega_des = kv.get_or("omega_des", 0.0)?;
        let start_distance = kv.get_or("start_distance", 1.3)?;
        if !(start_distance > 0.0) {
            return Err(kv.field("start_distance", "must be positive"));
        }
        let mode = kv.get_or("mode", Mode::Naive)?;
        let eta = kv.get_or("eta", 0.001)?;
        if !(eta > 0.0) {
            return Err(kv.field("eta", "must be positive"));
        }
        let seed = kv.get_or("seed", 0u64)?;

        let scene = parse_scene(kv)?;
        let corruption = if kv.has_prefix("corruption.") {
            let region = match kv.take("corruption.region") {
                Some(s) => {
                    let v: Vec<usize> = parse_list(&s).map_err(|e| kv.field("corruption.region", e))?;
                    let [u0, v0, u1, v1] = v[..] else {
                        return Err(kv.field("corruption.region", "expected `u0 v0 u1 v1`"));
                    };
                    Some(Region { u0, v0, u1, v1 })
                }
                None => None,
            };
            let fraction = kv.get_or("corruption.fraction", 1.0)?;
            if !(0.0..=1.0).contains(&fraction) {
                return Err(kv.field("corruption.fraction", "must lie in [0, 1]"));
            }
            Some(CorruptionSpec {
                region,
                bias: kv.get_or("corruption.bias", 0i32)?,
                fraction,
                seed: kv.get_or("corruption.seed", 0u64)?,
            })
        } else {
            None
        };

        Ok(Self {
            rig,
            matching,
            barrier,
            dt_dynamics,
            control_rate_hz,
            duration_s,
            v_des,
            omega_des,
            start_distance,
            mode,
            eta,
            seed,
            scene,
            corruption,
        })
    }
}

fn parse_texture(kv: &mut Entries, prefix: &str) -> Result<TextureSpec, ConfigError> {
    let kind_key = format!("{prefix}.texture");
    let kind: String = kv.get_or(&kind_key, "flat".to_owned())?;
    let base = kv.get_or(&format!("{prefix}.base"), 128.0)?;
    let tex = match kind.as_str() {
        "flat" => TextureSpec::flat(base),
        "checker" => TextureSpec::checker(
            kv.get_or(&format!("{prefix}.scale"), 0.05)?,
            kv.get_or(&format!("{prefix}.contrast"), 0.5)?,
            base,
        ),
        "noise" => TextureSpec::value_noise(
            kv.get_or(&format!("{prefix}.scale"), 0.03)?,
            kv.get_or(&format!("{prefix}.seed"), 0u64)?,
            kv.get_or(&format!("{prefix}.contrast"), 0.5)?,
            base,
        ),
        other => return Err(kv.field(&kind_key, format!("unknown texture `{other}`"))),
    };
    tex.validate().map_err(|e| kv.field(&kind_key, e))?;
    Ok(tex)
}

fn parse_scene(kv: &mut Entries) -> Result<Scene, ConfigError> {
    let background_depth = kv.get_or("background.depth", 8.0)?;
    let background = parse_texture(kv, "background")?;
    let mut obstacles = Vec::new();
    for i in 0.. {
        let prefix = format!("obstacle.{i}");
        let kind_key = format!("{prefix}.kind");
        let Some(kind) = kv.take(&kind_key) else { break };
        let point = |kv: &mut Entries, name: &str| -> Result<Point3<f64>, ConfigError> {
            let key = format!("{prefix}.{name}");
            let s = kv.take(&key).ok_or_else(|| kv.field(&key, "missing"))?;
            let v: Vec<f64> = parse_list(&s).map_err(|e| kv.field(&key, e))?;
            match v[..] {
                [x, y, z] => Ok(Point3::new(x, y, z)),
                _ => Err(kv.field(&key, "expected three numbers")),
            }
        };
        let shape = match kind.as_str() {
            "sphere" => Shape::Sphere { center: point(kv, "center")?, radius: kv.get(&format!("{prefix}.radius"))? },
            "plane" => Shape::Plane { point: point(kv, "point")?, normal: point(kv, "normal")? },
            "panel" => Shape::Panel {
                center: point(kv, "center")?,
                normal: point(kv, "normal")?,
                up: point(kv, "up")?,
                half_width: kv.get(&format!("{prefix}.half_width"))?,
                half_height: kv.get(&format!("{prefix}.half_height"))?,
            },
            other => return Err(kv.field(&kind_key, format!("unknown kind `{other}`"))),
        };
        let texture = parse_texture(kv, &prefix)?;
        obstacles.push(Obstacle { shape, texture });
    }
    Scene::new(obstacles, background_depth, background).map_err(|e| kv.field("obstacle.0.kind", e))
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<T>().map_err(|_| format!("cannot parse `{t}`")))
        .collect()
}

struct Entries {
    file: String,
    map: BTreeMap<String, String>,
}

impl Entries {
    fn parse(text: &str, file: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { file: file.to_owned(), line: n + 1 });
            };
            let key = k.trim().to_owned();
            if key.is_empty() {
                return Err(ConfigError::Syntax { file: file.to_owned(), line: n + 1 });
            }
            if map.insert(key.clone(), v.trim().to_owned()).is_some() {
                return Err(ConfigError::Duplicate { file: file.to_owned(), line: n + 1, key });
            }
        }
        Ok(Self { file: file.to_owned(), map })
    }

    fn field(&self, key: &str, reason: impl fmt::Display) -> ConfigError {
        ConfigError::Field { file: self.file.clone(), key: key.to_owned(), reason: reason.to_string() }
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.map.keys().any(|k| k.starts_with(prefix))
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let s = self.take(key).ok_or_else(|| self.field(key, "missing"))?;
        s.parse::<T>().map_err(|e| self.field(key, format!("cannot parse `{s}`: {e}")))
    }

    fn get_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        if self.map.contains_key(key) {
            self.get(key)
        } else {
            Ok(default)
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.map.into_keys().next() {
            Some(key) => Err(ConfigError::UnknownKey { file: self.file, key }),
            None => Ok(()),
        }
    }
}
