//! Offline pretraining of the error model over recorded frames.

use std::path::Path;

use crate::error_model::{apply_gradient, loss, loss_and_gradient, ErrorModelError, ErrorModelParams, StereoObservation, TrainingFrame};
use crate::scene::ImageTriple;
use crate::stereo::Matcher;

use super::frames::load_frames;
use super::SimError;

/// Training stops once the mean epoch loss moves by less than this.
pub const PLATEAU_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub frames: usize,
    pub epochs_run: usize,
    /// Mean pre-step loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean loss of the returned parameters over all usable frames.
    pub final_loss: f64,
}

/// Self-supervised training over `triples`: each epoch takes one gradient
/// step per frame, in order. Disparities and features are computed once,
/// as they do not depend on the parameters.
pub fn pretrain_triples(
    triples: &[ImageTriple],
    matcher: &dyn Matcher,
    eta: f64,
    epochs: usize,
) -> Result<(ErrorModelParams<f64>, PretrainReport), SimError> {
    if triples.is_empty() {
        return Err(SimError::Invalid("no frames to pretrain on".into()));
    }
    let mut cache: Vec<TrainingFrame<f64>> = Vec::with_capacity(triples.len());
    for t in triples {
        let obs = StereoObservation::compute(t, matcher)?;
        let frame = obs.training_frame(t)?;
        if frame.valid_count() > 0 {
            cache.push(frame);
        }
    }
    if cache.is_empty() {
        return Err(ErrorModelError::NoValidPixels.into());
    }
    let mut params = ErrorModelParams::<f64>::default();
    let mut epoch_losses = Vec::new();
    for _ in 0..epochs {
        let mut total = 0.0;
        for frame in &cache {
            let (l, grad) = loss_and_gradient(&params, frame)?;
            total += l;
            params = apply_gradient(&params, &grad, eta);
        }
        let mean = total / cache.len() as f64;
        let plateau = epoch_losses.last().is_some_and(|prev: &f64| (prev - mean).abs() < PLATEAU_TOLERANCE);
        epoch_losses.push(mean);
        if plateau {
            break;
        }
    }
    let final_loss = cache.iter().map(|f| loss(&params, f)).sum::<Result<f64, _>>()? / cache.len() as f64;
    let report = PretrainReport { frames: cache.len(), epochs_run: epoch_losses.len(), epoch_losses, final_loss };
    Ok((params, report))
}

/// Loads the frame fixtures in `dir`, pretrains, and writes the model file.
pub fn pretrain(
    dir: &Path,
    matcher: &dyn Matcher,
    eta: f64,
    epochs: usize,
    out: &Path,
) -> Result<PretrainReport, SimError> {
    let frames = load_frames(dir)?;
    if frames.is_empty() {
        return Err(SimError::Invalid(format!("{}: no frame fixtures found", dir.display())));
    }
    let triples: Vec<ImageTriple> = frames.into_iter().map(|(_, t)| t).collect();
    let (params, report) = pretrain_triples(&triples, matcher, eta, epochs)?;
    params.save(out)?;
    Ok(report)
}
