//! Proposal sources and RoI sampling.
//!
//! The oracle mode jitters ground-truth boxes (each coordinate moved by a
//! uniform fraction of the box size) and pads with uniformly random
//! negatives up to the configured count, so the mask mechanism can be
//! studied without a trained first stage. The learned mode is a
//! single-scale anchor RPN; its loss terms are produced by the training
//! pipeline. Second-stage RoIs are drawn from the proposals at a 1:3
//! positive:negative ratio, positives being IoU >= 0.5 against any
//! ground-truth box.

use crate::error::{Error, Result};
use crate::geometry::{decode, encode, iou, nms, Box, BoxDelta, LabeledBox, ScoredBox};
use rand::seq::SliceRandom;
use rand::Rng;

use super::model::{ANCHOR_SIZE, BACKBONE_STRIDE};

pub const POSITIVE_IOU: f64 = 0.5;
pub const RPN_POSITIVE_IOU: f64 = 0.7;
pub const RPN_NEGATIVE_IOU: f64 = 0.3;
pub const RPN_NMS_IOU: f64 = 0.7;
pub const RPN_SAMPLE: usize = 32;

/// First-stage output: proposal boxes, objectness, anchor labels, and
/// regression targets for the positives.
#[derive(Debug, Clone)]
pub struct ProposalSet {
    pub proposals: Vec<Box>,
    pub objectness: Vec<f64>,
    /// 1 for object anchors/jitters, 0 for background fill.
    pub assigned: Vec<u8>,
    pub reg_targets: Vec<Option<BoxDelta>>,
}

/// Jittered ground truth plus random negatives, balanced to `count`.
pub fn oracle_jitter_proposals<R: Rng>(
    gt: &[LabeledBox],
    frame_w: usize,
    frame_h: usize,
    count: usize,
    jitter: f64,
    rng: &mut R,
) -> Result<ProposalSet> {
    if gt.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let fw = frame_w as f64;
    let fh = frame_h as f64;
    let positives = count.div_ceil(2).max(gt.len().min(count));
    let mut proposals = Vec::with_capacity(count);
    let mut objectness = Vec::with_capacity(count);
    let mut assigned = Vec::with_capacity(count);
    let mut reg_targets = Vec::with_capacity(count);

    for idx in 0..positives {
        let g = &gt[idx % gt.len()];
        let (w, h) = (g.rect.width(), g.rect.height());
        let mut accepted = g.rect;
        for _ in 0..10 {
            let c = Box {
                x1: g.rect.x1 + rng.gen_range(-1.0..1.0) * jitter * w,
                y1: g.rect.y1 + rng.gen_range(-1.0..1.0) * jitter * h,
                x2: g.rect.x2 + rng.gen_range(-1.0..1.0) * jitter * w,
                y2: g.rect.y2 + rng.gen_range(-1.0..1.0) * jitter * h,
            };
            if let Some(clipped) = c.clip_to_frame(frame_w, frame_h) {
                if clipped.width() >= 2.0 && clipped.height() >= 2.0 {
                    accepted = clipped;
                    break;
                }
            }
        }
        proposals.push(accepted);
        objectness.push(1.0);
        assigned.push(1);
        reg_targets.push(Some(encode(&accepted, &g.rect)));
    }

    while proposals.len() < count {
        let w = rng.gen_range(6.0..0.5 * fw);
        let h = rng.gen_range(6.0..0.5 * fh);
        let x1 = rng.gen_range(0.0..fw - w);
        let y1 = rng.gen_range(0.0..fh - h);
        proposals.push(Box {
            x1,
            y1,
            x2: x1 + w,
            y2: y1 + h,
        });
        objectness.push(0.0);
        assigned.push(0);
        reg_targets.push(None);
    }

    Ok(ProposalSet {
        proposals,
        objectness,
        assigned,
        reg_targets,
    })
}

/// One square anchor per feature-map position, clipped to the frame.
/// Row-major over the map, matching the flattened prediction layout.
pub fn anchors(fmap_h: usize, fmap_w: usize, frame_w: usize, frame_h: usize) -> Vec<Box> {
    let mut out = Vec::with_capacity(fmap_h * fmap_w);
    for i in 0..fmap_h {
        for j in 0..fmap_w {
            let cx = (j as f64 + 0.5) * BACKBONE_STRIDE as f64;
            let cy = (i as f64 + 0.5) * BACKBONE_STRIDE as f64;
            let raw = Box {
                x1: cx - 0.5 * ANCHOR_SIZE,
                y1: cy - 0.5 * ANCHOR_SIZE,
                x2: cx + 0.5 * ANCHOR_SIZE,
                y2: cy + 0.5 * ANCHOR_SIZE,
            };
            out.push(raw.clip_to_frame(frame_w, frame_h).expect("anchor inside frame"));
        }
    }
    out
}

/// Anchor labels for RPN training: 1 (object), 0 (background),
/// or ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// IoU-based anchor assignment with the best-anchor-per-ground-truth rule,
/// plus the regression target of each positive.
pub fn assign_anchors(
    anchors: &[Box],
    gt: &[LabeledBox],
) -> (Vec<AnchorLabel>, Vec<Option<BoxDelta>>) {
    let mut labels = vec![AnchorLabel::Ignore; anchors.len()];
    let mut targets: Vec<Option<BoxDelta>> = vec![None; anchors.len()];
    if gt.is_empty() {
        return (vec![AnchorLabel::Negative; anchors.len()], targets);
    }
    let mut best_per_gt: Vec<(usize, f64)> = vec![(0, -1.0); gt.len()];
    for (ai, a) in anchors.iter().enumerate() {
        let mut best = 0.0;
        let mut best_gt = None;
        for (gi, g) in gt.iter().enumerate() {
            let ov = iou(a, &g.rect).unwrap_or(0.0);
            if ov > best {
                best = ov;
                best_gt = Some(gi);
            }
            if ov > best_per_gt[gi].1 {
                best_per_gt[gi] = (ai, ov);
            }
        }
        if best >= RPN_POSITIVE_IOU {
            labels[ai] = AnchorLabel::Positive;
            targets[ai] = best_gt.map(|gi| encode(a, &gt[gi].rect));
        } else if best < RPN_NEGATIVE_IOU {
            labels[ai] = AnchorLabel::Negative;
        }
    }
    for (gi, &(ai, ov)) in best_per_gt.iter().enumerate() {
        if ov > 0.0 {
            labels[ai] = AnchorLabel::Positive;
            targets[ai] = Some(encode(&anchors[ai], &gt[gi].rect));
        }
    }
    (labels, targets)
}

/// Balanced sample of anchor indices for the RPN loss.
pub fn sample_anchors<R: Rng>(labels: &[AnchorLabel], rng: &mut R) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == AnchorLabel::Positive)
        .collect();
    let mut neg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == AnchorLabel::Negative)
        .collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let np = pos.len().min(RPN_SAMPLE / 2);
    let nn = neg.len().min(RPN_SAMPLE - np);
    let mut out: Vec<usize> = pos[..np].to_vec();
    out.extend_from_slice(&neg[..nn]);
    out
}

/// Decode per-anchor predictions into second-stage proposals: top-`count`
/// by objectness after class-agnostic NMS. During training the ground-truth
/// boxes are appended first so the second stage always sees positives.
pub fn rpn_proposals(
    anchors: &[Box],
    obj_logits: &[f64],
    deltas: &[BoxDelta],
    frame_w: usize,
    frame_h: usize,
    count: usize,
    gt_for_training: Option<&[LabeledBox]>,
) -> Result<ProposalSet> {
    let mut scored = Vec::with_capacity(anchors.len());
    for (i, a) in anchors.iter().enumerate() {
        let b = decode(a, &deltas[i])?;
        let Some(clipped) = b.clip_to_frame(frame_w, frame_h) else {
            continue;
        };
        if clipped.width() < 2.0 || clipped.height() < 2.0 {
            continue;
        }
        let p = 1.0 / (1.0 + (-obj_logits[i]).exp());
        scored.push(ScoredBox {
            rect: clipped,
            score: p,
            label: 0, // class-agnostic
        });
    }
    let keep = nms(&scored, RPN_NMS_IOU)?;

    let mut proposals: Vec<Box> = Vec::with_capacity(count);
    let mut objectness = Vec::with_capacity(count);
    if let Some(gt) = gt_for_training {
        for g in gt {
            proposals.push(g.rect);
            objectness.push(1.0);
        }
    }
    for &k in &keep {
        if proposals.len() >= count {
            break;
        }
        proposals.push(scored[k].rect);
        objectness.push(scored[k].score);
    }
    if proposals.is_empty() {
        return Err(Error::NoRois);
    }
    let assigned = vec![0u8; proposals.len()];
    let reg_targets = vec![None; proposals.len()];
    Ok(ProposalSet {
        proposals,
        objectness,
        assigned,
        reg_targets,
    })
}

/// Second-stage training RoIs with class labels and regression targets.
#[derive(Debug, Clone)]
pub struct SampledRois {
    pub boxes: Vec<Box>,
    /// 0 background, else the matched ground-truth class.
    pub labels: Vec<usize>,
    pub deltas: Vec<Option<BoxDelta>>,
}

impl SampledRois {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

/// Label proposals against the ground truth and draw a 1:3 balanced batch
/// of at most `batch` RoIs.
pub fn sample_rois<R: Rng>(
    proposals: &[Box],
    gt: &[LabeledBox],
    batch: usize,
    rng: &mut R,
) -> Result<SampledRois> {
    if proposals.is_empty() {
        return Err(Error::NoRois);
    }
    let mut pos: Vec<(usize, usize, BoxDelta)> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (pi, p) in proposals.iter().enumerate() {
        let mut best = 0.0;
        let mut best_gt = None;
        for g in gt {
            let ov = iou(p, &g.rect).unwrap_or(0.0);
            if ov > best {
                best = ov;
                best_gt = Some(g);
            }
        }
        match best_gt {
            Some(g) if best >= POSITIVE_IOU => pos.push((pi, g.label, encode(p, &g.rect))),
            _ => neg.push(pi),
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let np = pos.len().min(batch.div_ceil(4));
    let nn = neg.len().min(batch - np);
    if np + nn == 0 {
        return Err(Error::NoRois);
    }

    let mut boxes = Vec::with_capacity(np + nn);
    let mut labels = Vec::with_capacity(np + nn);
    let mut deltas = Vec::with_capacity(np + nn);
    for &(pi, label, delta) in &pos[..np] {
        boxes.push(proposals[pi]);
        labels.push(label);
        deltas.push(Some(delta));
    }
    for &pi in &neg[..nn] {
        boxes.push(proposals[pi]);
        labels.push(0);
        deltas.push(None);
    }
    Ok(SampledRois {
        boxes,
        labels,
        deltas,
    })
}
