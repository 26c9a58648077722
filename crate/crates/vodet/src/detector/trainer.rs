//! Epoch loop with the step-decay schedule, and clip-level evaluation.

use crate::error::{Error, Result};
use crate::eval::{compute_map, EvalFrame, EvalResult};
use crate::rng::{streams, stream_rng};
use crate::sampling::{sample_support, sample_train_support, SamplingPlan};
use crate::synthvid::VideoClip;
use rand::Rng;

use super::{Detector, LossReport};

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 7,
            steps_per_epoch: 64,
            seed: 0,
        }
    }
}

/// Learning rate at a 0-based epoch index under the divide-by-10 schedule.
pub fn learning_rate_at(base: f64, decay_epochs: &[usize], epoch: usize) -> f64 {
    let drops = decay_epochs.iter().filter(|&&e| epoch + 1 >= e).count();
    base * 0.1f64.powi(drops as i32)
}

/// Train over a clip set: each step draws a clip and target frame uniformly
/// and `train_support` random support frames from the same clip. Returns
/// one report per step via the callback.
pub fn train(
    det: &mut Detector,
    clips: &[VideoClip],
    plan: &SamplingPlan,
    settings: &TrainSettings,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<()> {
    if clips.is_empty() {
        return Err(Error::EmptyClip);
    }
    let mut frame_rng = stream_rng(settings.seed, streams::FRAME_SAMPLING);
    let mut prop_rng = stream_rng(settings.seed, streams::PROPOSALS);
    let mut step = 0usize;
    for epoch in 0..settings.epochs {
        let lr = learning_rate_at(det.config.learning_rate, &det.config.decay_epochs, epoch);
        for _ in 0..settings.steps_per_epoch {
            // draw until the target frame carries at least one annotation
            let (clip, target) = loop {
                let ci = frame_rng.gen_range(0..clips.len());
                let ti = frame_rng.gen_range(0..clips[ci].len());
                if !clips[ci].annotations[ti].is_empty() {
                    break (&clips[ci], ti);
                }
            };
            let support = sample_train_support(clip.len(), target, plan, &mut frame_rng)?;
            let report = det.train_step_inner(
                &clip.frames,
                &clip.annotations,
                target,
                &support,
                lr,
                &mut prop_rng,
            )?;
            on_step(step, &report);
            step += 1;
        }
    }
    Ok(())
}

/// Run inference over every frame of every clip under `plan` and score the
/// detections.
pub fn evaluate_on_clips(
    det: &Detector,
    clips: &[VideoClip],
    plan: &SamplingPlan,
    thresholds: &[f64],
    seed: u64,
) -> Result<EvalResult> {
    let mut rng = stream_rng(seed, streams::EVAL);
    let mut frames = Vec::new();
    for clip in clips {
        let fmaps = det.compute_feature_maps(&clip.frames)?;
        for target in 0..clip.len() {
            if clip.annotations[target].is_empty() {
                continue;
            }
            let support = sample_support(clip.len(), target, plan)?;
            let mut selected = Vec::with_capacity(1 + support.len());
            selected.push(fmaps[target].clone());
            for &s in &support {
                selected.push(fmaps[s].clone());
            }
            let detections =
                det.infer_with_feature_maps(&selected, &clip.annotations[target], &mut rng)?;
            frames.push(EvalFrame {
                detections,
                ground_truth: clip.annotations[target].clone(),
            });
        }
    }
    compute_map(&frames, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_divides_by_ten() {
        let base = 0.02;
        let decay = vec![4, 6];
        assert_eq!(learning_rate_at(base, &decay, 0), base);
        assert_eq!(learning_rate_at(base, &decay, 2), base);
        assert!((learning_rate_at(base, &decay, 3) - base * 0.1).abs() < 1e-15);
        assert!((learning_rate_at(base, &decay, 4) - base * 0.1).abs() < 1e-15);
        assert!((learning_rate_at(base, &decay, 5) - base * 0.01).abs() < 1e-15);
        assert!((learning_rate_at(base, &decay, 6) - base * 0.01).abs() < 1e-15);
    }
}
