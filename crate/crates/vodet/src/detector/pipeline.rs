//! The end-to-end forward graph: backbone over target and support frames,
//! proposals, temporal RoI aggregation at `roi_size`, bilinear upsampling
//! to `up_size`, detection and mask heads, and the combined loss. Training
//! and inference share this assembly; inference simply skips the mask
//! branch and the backward pass.

use crate::autograd::{Tape, VarId};
use crate::error::{Error, Result};
use crate::features::{match_positions_batch, msa_aggregate_on_tape, roi_to_fmap_region, FeatureMap, GridSource, RoiFeatureGrid};
use crate::geometry::{decode_clamped, nms, Box, BoxDelta, LabeledBox, ScoredBox};
use crate::maskgen;
use ndarray::{Array2, Array3, Ix3};
use rand_chacha::ChaCha8Rng;

use super::model::{
    backbone_graph, batch_frames, boxmask_head_graph, detection_head_graph, frame_to_chw,
    msa_vars, rpn_graph, DetectorConfig, ProposalMode, BACKBONE_STRIDE,
};
use super::params::{ParamBinder, ParamStore};
use super::proposal::{
    anchors, assign_anchors, oracle_jitter_proposals, rpn_proposals, sample_anchors,
    sample_rois, AnchorLabel, ProposalSet, SampledRois,
};
use super::{Detector, LossReport};

/// Everything the shared forward assembly produces before the heads.
pub(super) struct ForwardState {
    pub tape: Tape,
    pub binder: ParamBinder,
    pub target_fmap: VarId,
    pub support_fmaps: Vec<VarId>,
    pub frame_w: usize,
    pub frame_h: usize,
}

impl ForwardState {
    fn fmap_view(&self, id: VarId) -> FeatureMap {
        FeatureMap {
            values: self
                .tape
                .value(id)
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap()
                .to_owned(),
            stride: BACKBONE_STRIDE,
        }
    }
}

/// Run the backbone over the target frame (first) and support frames.
pub(super) fn build_feature_maps(
    store: &ParamStore,
    frames: &[Array3<f64>],
) -> Result<ForwardState> {
    let batch = batch_frames(frames)?;
    let (_, _, h, w) = batch.dim();
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(store);
    let input = tape.leaf(batch.into_dyn());
    let fmaps = backbone_graph(&mut tape, &mut binder, store, input);
    let target_fmap = tape.index_batch(fmaps, 0);
    let support_fmaps = (1..frames.len())
        .map(|i| tape.index_batch(fmaps, i))
        .collect();
    Ok(ForwardState {
        tape,
        binder,
        target_fmap,
        support_fmaps,
        frame_w: w,
        frame_h: h,
    })
}

/// Temporal RoI aggregation: align each RoI on the target map, match every
/// bin against each support map, fuse with attention, upsample. Returns the
/// stacked `(K, C, up, up)` node.
pub(super) fn aggregate_rois(
    state: &mut ForwardState,
    store: &ParamStore,
    config: &DetectorConfig,
    rois: &[Box],
) -> Result<VarId> {
    let target_view = state.fmap_view(state.target_fmap);
    let regions = rois
        .iter()
        .map(|r| roi_to_fmap_region(r, &target_view))
        .collect::<Result<Vec<_>>>()?;
    let aligned = state
        .tape
        .roi_align(state.target_fmap, &regions, config.roi_size);

    let support_views: Vec<FeatureMap> = state
        .support_fmaps
        .iter()
        .map(|&id| state.fmap_view(id))
        .collect();
    let vars = msa_vars(&mut state.tape, &mut state.binder, store);

    // batch the similarity matching per support map
    let grid_values: Vec<RoiFeatureGrid> = (0..rois.len())
        .map(|k| RoiFeatureGrid {
            values: state
                .tape
                .value(aligned)
                .index_axis(ndarray::Axis(0), k)
                .to_owned()
                .into_dimensionality::<Ix3>()
                .unwrap(),
            source: GridSource::Target,
        })
        .collect();
    let mut matched_positions = Vec::with_capacity(support_views.len());
    for view in &support_views {
        matched_positions.push(match_positions_batch(&grid_values, view)?);
    }

    let mut aggregated = Vec::with_capacity(rois.len());
    for k in 0..rois.len() {
        let target_grid = state.tape.index_batch(aligned, k);
        let mut matched = Vec::with_capacity(support_views.len());
        for (si, per_grid) in matched_positions.iter().enumerate() {
            matched.push(state.tape.gather_positions(
                state.support_fmaps[si],
                &per_grid[k],
                config.roi_size,
            ));
        }
        aggregated.push(msa_aggregate_on_tape(
            &mut state.tape,
            target_grid,
            &matched,
            &vars,
            config.msa_heads,
        ));
    }
    let stacked = state.tape.stack_grids(&aggregated);
    Ok(if config.up_size != config.roi_size {
        state
            .tape
            .bilinear_resize(stacked, config.up_size, config.up_size)
    } else {
        stacked
    })
}

pub(super) struct RpnOutputs {
    pub l_cls: VarId,
    pub l_reg: VarId,
    pub proposals: ProposalSet,
}

/// RPN forward, loss terms over a balanced anchor sample, and decoded
/// proposals (boxes detached from the graph).
pub(super) fn rpn_stage(
    state: &mut ForwardState,
    store: &ParamStore,
    gt: &[LabeledBox],
    config: &DetectorConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<RpnOutputs> {
    // run on the target map alone, restored to a singleton batch
    let (c, hf, wf) = {
        let s = state.tape.value(state.target_fmap).shape().to_vec();
        (s[0], s[1], s[2])
    };
    let single = state.tape.reshape(state.target_fmap, &[1, c, hf, wf]);
    let (obj, reg) = rpn_graph(&mut state.tape, &mut state.binder, store, single);
    let obj_rows = state.tape.nchw_to_rows(obj); // (Hf*Wf, 1)
    let reg_rows = state.tape.nchw_to_rows(reg); // (Hf*Wf, 4)

    let anchor_boxes = anchors(hf, wf, state.frame_w, state.frame_h);
    let (labels, targets) = assign_anchors(&anchor_boxes, gt);

    // loss over a balanced sample; regression gated to positive anchors
    let sampled = if training {
        sample_anchors(&labels, rng)
    } else {
        Vec::new()
    };
    let (l_cls, l_reg) = if sampled.is_empty() {
        (zero_scalar(&mut state.tape), zero_scalar(&mut state.tape))
    } else {
        let sel_obj = state.tape.select_rows(obj_rows, &sampled);
        let flat = state.tape.reshape(sel_obj, &[sampled.len()]);
        let cls_targets: Vec<f64> = sampled
            .iter()
            .map(|&i| match labels[i] {
                AnchorLabel::Positive => 1.0,
                _ => 0.0,
            })
            .collect();
        let l_cls = state.tape.bce_logits_mean(flat, &cls_targets);

        let positives: Vec<usize> = sampled
            .iter()
            .copied()
            .filter(|&i| labels[i] == AnchorLabel::Positive)
            .collect();
        let l_reg = if positives.is_empty() {
            zero_scalar(&mut state.tape)
        } else {
            let sel_reg = state.tape.select_rows(reg_rows, &positives);
            let mut target = Array2::<f64>::zeros((positives.len(), 4));
            for (r, &i) in positives.iter().enumerate() {
                let d = targets[i].expect("positive anchor has a target");
                target[[r, 0]] = d.dx;
                target[[r, 1]] = d.dy;
                target[[r, 2]] = d.dw;
                target[[r, 3]] = d.dh;
            }
            let weights = vec![1.0; positives.len()];
            state
                .tape
                .smooth_l1(sel_reg, &target, &weights, positives.len() as f64)
        };
        (l_cls, l_reg)
    };

    // decode proposals from the predicted values
    let obj_values: Vec<f64> = state
        .tape
        .value(obj_rows)
        .iter()
        .copied()
        .collect();
    let reg_values = state.tape.value(reg_rows).clone();
    let deltas: Vec<BoxDelta> = (0..anchor_boxes.len())
        .map(|i| BoxDelta {
            dx: reg_values[[i, 0]],
            dy: reg_values[[i, 1]],
            dw: reg_values[[i, 2]],
            dh: reg_values[[i, 3]],
        })
        .collect();
    let proposals = rpn_proposals(
        &anchor_boxes,
        &obj_values,
        &deltas,
        state.frame_w,
        state.frame_h,
        config.proposal_count,
        if training { Some(gt) } else { None },
    )?;
    Ok(RpnOutputs {
        l_cls,
        l_reg,
        proposals,
    })
}

fn zero_scalar(tape: &mut Tape) -> VarId {
    tape.leaf(ndarray::arr0(0.0).into_dyn())
}

fn check_finite(term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term, value })
    }
}

/// Loss report plus per-parameter gradients (store order) for one step,
/// without touching the parameters.
pub(super) fn eval_step(
    det: &Detector,
    frames: &[ndarray::Array3<f32>],
    annotations: &[Vec<LabeledBox>],
    target: usize,
    support: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(LossReport, Vec<Option<ndarray::ArrayD<f64>>>)> {
    if frames.is_empty() {
        return Err(Error::EmptyClip);
    }
    if target >= frames.len() {
        return Err(Error::TargetOutOfRange {
            target,
            video_len: frames.len(),
        });
    }
    let gt = &annotations[target];
    let config = det.config.clone();

    let mut chw = Vec::with_capacity(1 + support.len());
    chw.push(frame_to_chw(&frames[target]));
    for &s in support {
        chw.push(frame_to_chw(&frames[s]));
    }
    let mut state = build_feature_maps(&det.params, &chw)?;

    // stage one
    let (rpn_terms, proposals) = match config.proposal_mode {
        ProposalMode::OracleJitter => {
            let set = oracle_jitter_proposals(
                gt,
                state.frame_w,
                state.frame_h,
                config.proposal_count,
                config.jitter,
                rng,
            )?;
            (None, set)
        }
        ProposalMode::LearnedRpn => {
            let out = rpn_stage(&mut state, &det.params, gt, &config, true, rng)?;
            (Some((out.l_cls, out.l_reg)), out.proposals)
        }
    };

    // stage two
    let rois = sample_rois(&proposals.proposals, gt, config.roi_batch, rng)?;
    let grids = aggregate_rois(&mut state, &det.params, &config, &rois.boxes)?;
    let (cls, reg) = detection_head_graph(&mut state.tape, &mut state.binder, &det.params, grids);

    let l_cls = state.tape.softmax_ce_mean(cls, &rois.labels);
    let l_reg = regression_loss(&mut state.tape, reg, &rois);

    // mask branch
    let l_bm_node = if config.boxmask_enabled {
        boxmask_loss_node(&mut state, &det.params, &config, grids, &rois, gt)?
    } else {
        None
    };

    let mut terms = Vec::new();
    if let Some((rc, rr)) = rpn_terms {
        terms.push((rc, 1.0));
        terms.push((rr, 1.0));
    }
    terms.push((l_cls, 1.0));
    terms.push((l_reg, 1.0));
    if let Some(bm) = l_bm_node {
        if config.lambda_bm != 0.0 {
            terms.push((bm, config.lambda_bm));
        }
    }
    let l_total = state.tape.weighted_sum(&terms);

    let report = LossReport {
        l_rpn_cls: check_finite(
            "l_rpn_cls",
            rpn_terms.map_or(0.0, |(rc, _)| state.tape.scalar(rc)),
        )?,
        l_rpn_reg: check_finite(
            "l_rpn_reg",
            rpn_terms.map_or(0.0, |(_, rr)| state.tape.scalar(rr)),
        )?,
        l_cls: check_finite("l_cls", state.tape.scalar(l_cls))?,
        l_reg: check_finite("l_reg", state.tape.scalar(l_reg))?,
        l_bm: check_finite(
            "l_bm",
            l_bm_node.map_or(0.0, |bm| state.tape.scalar(bm)),
        )?,
        l_total: check_finite("l_total", state.tape.scalar(l_total))?,
    };

    let grads = state.tape.backward(l_total);
    let collected: Vec<Option<ndarray::ArrayD<f64>>> = state
        .binder
        .collect(&grads)
        .into_iter()
        .map(|g| g.cloned())
        .collect();
    Ok((report, collected))
}

/// One training step on a target frame with chosen support frames,
/// returning the pre-update loss report.
pub(super) fn train_step_impl(
    det: &mut Detector,
    frames: &[ndarray::Array3<f32>],
    annotations: &[Vec<LabeledBox>],
    target: usize,
    support: &[usize],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    let (report, grads) = eval_step(det, frames, annotations, target, support, rng)?;
    let refs: Vec<Option<&ndarray::ArrayD<f64>>> = grads.iter().map(|g| g.as_ref()).collect();
    let momentum = det.config.momentum;
    det.optimizer.step(&mut det.params, &refs, lr, momentum);
    Ok(report)
}

pub(super) fn regression_loss(tape: &mut Tape, reg: VarId, rois: &SampledRois) -> VarId {
    let k = rois.deltas.len();
    let mut target = Array2::<f64>::zeros((k, 4));
    let mut weights = vec![0.0; k];
    for (i, d) in rois.deltas.iter().enumerate() {
        if let Some(d) = d {
            weights[i] = 1.0;
            target[[i, 0]] = d.dx;
            target[[i, 1]] = d.dy;
            target[[i, 2]] = d.dw;
            target[[i, 3]] = d.dh;
        }
    }
    let norm = rois.num_positive().max(1) as f64;
    tape.smooth_l1(reg, &target, &weights, norm)
}

/// Mask logits for the chosen RoIs and the cross-entropy node against the
/// rasterized targets. Returns `None` when the positives-only restriction
/// leaves nothing to supervise.
fn boxmask_loss_node(
    state: &mut ForwardState,
    store: &ParamStore,
    config: &DetectorConfig,
    grids: VarId,
    rois: &SampledRois,
    gt: &[LabeledBox],
) -> Result<Option<VarId>> {
    let (sel_grids, sel_boxes): (VarId, Vec<Box>) = if config.boxmask_positives_only {
        let pos: Vec<usize> = (0..rois.boxes.len())
            .filter(|&i| rois.labels[i] > 0)
            .collect();
        if pos.is_empty() {
            return Ok(None);
        }
        let picked: Vec<VarId> = pos
            .iter()
            .map(|&i| state.tape.index_batch(grids, i))
            .collect();
        (
            state.tape.stack_grids(&picked),
            pos.iter().map(|&i| rois.boxes[i]).collect(),
        )
    } else {
        (grids, rois.boxes.clone())
    };

    let logits = boxmask_head_graph(&mut state.tape, &mut state.binder, store, config, sel_grids);
    let m = config.mask_resolution;
    let targets = maskgen::build_roi_targets(&sel_boxes, gt, m)?;
    let flat_targets: Vec<usize> = targets
        .iter()
        .flat_map(|t| {
            (0..m).flat_map(move |i| (0..m).map(move |j| t.label_at(i, j) as usize))
        })
        .collect();
    let rows = state.tape.nchw_to_rows(logits);
    Ok(Some(state.tape.softmax_ce_mean(rows, &flat_targets)))
}

/// Inference over precomputed feature maps: proposals, aggregation, the
/// detection head only, decoding, per-class NMS, score filter.
pub(super) fn infer_impl(
    det: &Detector,
    fmaps: &[FeatureMap],
    gt_for_oracle: &[LabeledBox],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ScoredBox>> {
    if fmaps.is_empty() {
        return Err(Error::EmptyClip);
    }
    let config = det.config.clone();
    let frame_w = fmaps[0].width() * fmaps[0].stride;
    let frame_h = fmaps[0].height() * fmaps[0].stride;

    let mut tape = Tape::new();
    let binder = ParamBinder::new(&det.params);
    let target_fmap = tape.leaf(fmaps[0].values.clone().into_dyn());
    let support_fmaps: Vec<VarId> = fmaps[1..]
        .iter()
        .map(|f| tape.leaf(f.values.clone().into_dyn()))
        .collect();
    let mut state = ForwardState {
        tape,
        binder,
        target_fmap,
        support_fmaps,
        frame_w,
        frame_h,
    };

    let proposals = match config.proposal_mode {
        ProposalMode::OracleJitter => oracle_jitter_proposals(
            gt_for_oracle,
            frame_w,
            frame_h,
            config.proposal_count,
            config.jitter,
            rng,
        )?,
        ProposalMode::LearnedRpn => {
            rpn_stage(&mut state, &det.params, &[], &config, false, rng)?.proposals
        }
    };

    let grids = aggregate_rois(&mut state, &det.params, &config, &proposals.proposals)?;
    let (cls, reg) =
        detection_head_graph(&mut state.tape, &mut state.binder, &det.params, grids);
    let cls_values = state.tape.value(cls).clone();
    let reg_values = state.tape.value(reg).clone();

    let classes = config.num_classes + 1;
    let mut dets = Vec::new();
    for (k, roi) in proposals.proposals.iter().enumerate() {
        let delta = BoxDelta {
            dx: reg_values[[k, 0]],
            dy: reg_values[[k, 1]],
            dw: reg_values[[k, 2]],
            dh: reg_values[[k, 3]],
        };
        let Ok(rect) = decode_clamped(roi, &delta, frame_w, frame_h) else {
            continue;
        };
        // softmax over L+1 classes
        let mut max = f64::NEG_INFINITY;
        for c in 0..classes {
            max = max.max(cls_values[[k, c]]);
        }
        let denom: f64 = (0..classes).map(|c| (cls_values[[k, c]] - max).exp()).sum();
        for c in 1..classes {
            let score = (cls_values[[k, c]] - max).exp() / denom;
            dets.push(ScoredBox {
                rect,
                score,
                label: c,
            });
        }
    }

    let kept = nms(&dets, config.nms_iou)?;
    let mut out: Vec<ScoredBox> = kept
        .into_iter()
        .map(|i| dets[i])
        .filter(|d| d.score >= config.score_thresh)
        .collect();
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    Ok(out)
}
