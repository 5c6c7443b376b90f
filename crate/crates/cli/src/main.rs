use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use stereo_cbf::error_model::{quantile, ErrorModelParams, FrameFeatures, StereoObservation, DEFAULT_CLASSES};
use stereo_cbf::geometry::PixelCoord;
use stereo_cbf::scene::render_triple;
use stereo_cbf::sim::frames::{lattice_scene, render_family_frames, save_frame, TextureFamily};
use stereo_cbf::sim::output::{emit_outputs, emit_overlay, format_report};
use stereo_cbf::sim::pretrain::pretrain;
use stereo_cbf::sim::{run_experiment, start_pose, ConfigError, CorruptingMatcher, Mode, SimConfig, SimError};
use stereo_cbf::stereo::{reconstruct, BlockMatcher, MatchConfig};
use stereo_cbf::theorem::run_theorem_trials;
use stereo_cbf::safety::LipschitzConstants;

const EXIT_FAILURE: u8 = 1;
const EXIT_UNSAFE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "stereo-cbf", version, about = "Stereo-vision safety filter simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop experiment and write its trajectory, report and plots.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the mode in the configuration file.
        #[arg(long)]
        mode: Option<Mode>,
        /// Results go to `<out>/<mode>/`; `<out>/overlay.png` is refreshed.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Overrides the seed in the configuration file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train an error model on a directory of `<stem>_{1,2,3}.pgm` frame triples.
    Pretrain {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.001)]
        eta: f64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        /// Matcher settings are read from this configuration when given.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render generated training frames into a directory.
    RenderFrames {
        #[arg(long)]
        family: TextureFamily,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Rig settings are read from this configuration when given.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print reconstruction and error-model calibration metrics.
    EvalStereo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Also write the metrics to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Randomized check that robust constraints imply true safety.
    CheckTheorem {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.chain().any(|c| {
                c.downcast_ref::<ConfigError>().is_some()
                    || matches!(c.downcast_ref::<SimError>(), Some(SimError::Config(_) | SimError::MissingModel(_)))
            });
            ExitCode::from(if config_error { EXIT_CONFIG } else { EXIT_FAILURE })
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Simulate { config, mode, out, model, seed } => simulate(&config, mode, &out, model.as_deref(), seed),
        Command::Pretrain { frames, out, eta, epochs, config } => {
            let matching = match config {
                Some(path) => SimConfig::load(path)?.matching,
                None => MatchConfig::default(),
            };
            let report = pretrain(&frames, &BlockMatcher::new(matching), eta, epochs, &out)?;
            println!("frames = {}", report.frames);
            println!("epochs_run = {}", report.epochs_run);
            println!("final_loss = {}", report.final_loss);
            Ok(0)
        }
        Command::RenderFrames { family, count, seed, out, config } => {
            let rig = match config {
                Some(path) => SimConfig::load(path)?.rig,
                None => stereo_cbf::CameraRig::centered(100.0, 0.06, 160, 120, 20)?,
            };
            std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            for (i, (triple, _)) in render_family_frames(family, count, seed, &rig).iter().enumerate() {
                save_frame(&out, &format!("frame{i:04}"), triple)?;
            }
            println!("wrote {count} frame triples to {}", out.display());
            Ok(0)
        }
        Command::EvalStereo { config, model, out, scenes, seed } => {
            let cfg = SimConfig::load(&config)?;
            let model = model.map(|p| ErrorModelParams::<f64>::load(&p).with_context(|| p.display().to_string())).transpose()?;
            let text = eval_stereo(&cfg, model.as_ref(), scenes, seed)?;
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, &text).with_context(|| path.display().to_string())?;
            }
            Ok(0)
        }
        Command::CheckTheorem { trials, seed, out } => {
            let sound = run_theorem_trials(trials, seed, None);
            let control = run_theorem_trials(trials, seed, Some(LipschitzConstants::zero()));
            let mut text = String::new();
            writeln!(text, "trials = {}", sound.trials)?;
            writeln!(text, "premise_held = {}", sound.premise_held)?;
            writeln!(text, "vacuous = {}", sound.vacuous)?;
            writeln!(text, "violations = {}", sound.violations)?;
            writeln!(text, "negative_control_violations = {}", control.violations)?;
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, &text).with_context(|| path.display().to_string())?;
            }
            if sound.violations > 0 {
                eprintln!("implication violated in {} trials", sound.violations);
                return Ok(EXIT_FAILURE);
            }
            if control.violations == 0 {
                eprintln!("negative control with zero Lipschitz constants found no violation");
                return Ok(EXIT_FAILURE);
            }
            Ok(0)
        }
    }
}

fn simulate(config: &Path, mode: Option<Mode>, out: &Path, model: Option<&Path>, seed: Option<u64>) -> Result<u8> {
    let mut cfg = SimConfig::load(config)?;
    if let Some(mode) = mode {
        cfg.mode = mode;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let params = match model {
        Some(p) => Some(ErrorModelParams::<f64>::load(p).with_context(|| p.display().to_string())?),
        None if cfg.mode.needs_model() => return Err(SimError::MissingModel(cfg.mode).into()),
        None => None,
    };
    let (log, report) = run_experiment(&cfg, params.as_ref())?;
    let dir = out.join(cfg.mode.name());
    emit_outputs(&log, &report, &dir).with_context(|| dir.display().to_string())?;
    emit_overlay(out).with_context(|| out.display().to_string())?;
    print!("{}", format_report(&report));
    if report.breaks_promise() {
        eprintln!("mode {} promised safety but min h_ns_true = {}", cfg.mode, report.min_h_ns_true);
        return Ok(EXIT_UNSAFE);
    }
    Ok(0)
}

/// Reconstruction exactness on lattice scenes, then error-model calibration
/// against ground-truth errors on the configured scene at the start pose.
fn eval_stereo(cfg: &SimConfig, model: Option<&ErrorModelParams<f64>>, scenes: usize, seed: u64) -> Result<String> {
    use rand::SeedableRng;
    let mut text = String::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut exact, mut checked) = (0usize, 0usize);
    for _ in 0..scenes {
        let scene = lattice_scene(&cfg.rig, &mut rng);
        let (_, gt) = render_triple(&scene, &stereo_cbf::RobotPose::origin(), &cfg.rig);
        let recon = reconstruct(&gt.d12, &gt.d23)?;
        for v in 0..cfg.rig.height() {
            for u in 0..cfg.rig.width() {
                if gt.is_occluded(u, v) || gt.d13.get(u, v).is_none() {
                    continue;
                }
                checked += 1;
                exact += usize::from(recon.get(u, v) == gt.d13.get(u, v));
            }
        }
    }
    writeln!(text, "reconstruction_scenes = {scenes}")?;
    writeln!(text, "reconstruction_pixels = {checked}")?;
    writeln!(text, "reconstruction_exact_fraction = {}", if checked == 0 { 1.0 } else { exact as f64 / checked as f64 })?;

    let pose = start_pose(cfg);
    let (triple, gt) = render_triple(&cfg.scene, &pose, &cfg.rig);
    let matcher = CorruptingMatcher { inner: BlockMatcher::new(cfg.matching), corruption: cfg.corruption };
    let obs = StereoObservation::compute(&triple, &matcher)?;
    let features = FrameFeatures::new(&triple.left, &triple.right, &obs.d13)?;
    let mut empirical = [0.0f64; DEFAULT_CLASSES];
    let mut predicted = [0.0f64; DEFAULT_CLASSES];
    let (mut n, mut covered) = (0usize, 0usize);
    let mut probs = [0.0; DEFAULT_CLASSES];
    for v in 0..cfg.rig.height() {
        for u in 0..cfg.rig.width() {
            let (Some(d_hat), Some(d_gt)) = (obs.d13.get(u, v), gt.d13.get(u, v)) else { continue };
            if d_hat == 0 || gt.points[v * cfg.rig.width() + u].is_none() {
                continue;
            }
            let err = usize::from(d_hat.abs_diff(d_gt));
            empirical[err.min(DEFAULT_CLASSES - 1)] += 1.0;
            n += 1;
            if let Some(m) = model {
                m.predict_into(&features.at::<f64>(PixelCoord::new(u, v)), &mut probs);
                for (acc, p) in predicted.iter_mut().zip(&probs) {
                    *acc += p;
                }
                covered += usize::from(err <= usize::from(quantile(&probs, cfg.barrier.sigma, cfg.rig.d_max())));
            }
        }
    }
    writeln!(text, "calibration_pixels = {n}")?;
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{:.6}", x / n.max(1) as f64)).collect::<Vec<_>>().join(" ");
    writeln!(text, "empirical_error_frequencies = {}", fmt(&empirical))?;
    if model.is_some() {
        writeln!(text, "mean_predicted_probabilities = {}", fmt(&predicted))?;
        let gap = empirical.iter().zip(&predicted).map(|(e, p)| (e - p).abs() / n.max(1) as f64).fold(0.0, f64::max);
        writeln!(text, "max_calibration_gap = {gap:.6}")?;
        writeln!(text, "quantile_coverage = {:.6}", covered as f64 / n.max(1) as f64)?;
    }
    if n == 0 {
        bail!("no obstacle pixels visible from the start pose");
    }
    Ok(text)
}
