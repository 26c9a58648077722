//! The desk-scale two-stage detector: a small stride-8 backbone, an oracle
//! or learned proposal stage, temporal RoI aggregation, a pooled detection
//! head, and the box-supervised per-pixel mask head whose loss joins the
//! total with weight `lambda_bm`. The mask branch is never evaluated at
//! inference.

mod checkpoint;
mod model;
mod params;
mod pipeline;
mod proposal;
mod trainer;

pub use checkpoint::{load_checkpoint, manifest_path, save_checkpoint};
pub use model::{DetectorConfig, ProposalMode, BACKBONE_CHANNELS, BACKBONE_STRIDE, MIN_FRAME_SIDE};
pub use proposal::{ProposalSet, SampledRois};
pub use trainer::{evaluate_on_clips, learning_rate_at, train, TrainSettings};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::features::{FeatureMap, GridSource, RoiFeatureGrid};
use crate::geometry::{BoxDelta, LabeledBox, ScoredBox};
use crate::maskgen::{self, LabelMask, MaskLogits};
use crate::rng::{streams, stream_rng};
use crate::sampling::{sample_support, SamplingPlan};
use crate::synthvid::VideoClip;
use ndarray::{Array2, Array3, Axis, Ix4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use params::{ParamBinder, ParamStore, SgdState};

/// Per-step loss terms. `l_total` is exactly
/// `l_cls + l_reg + lambda_bm * l_bm` plus the RPN terms in learned mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rpn_cls: f64,
    pub l_rpn_reg: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_bm: f64,
    pub l_total: f64,
}

/// Per-RoI detection head outputs.
#[derive(Debug, Clone)]
pub struct DetectionBatch {
    /// Raw class logits over `L + 1` classes, one row per RoI.
    pub class_logits: Array2<f64>,
    pub deltas: Vec<BoxDelta>,
}

pub struct Detector {
    pub config: DetectorConfig,
    params: ParamStore,
    optimizer: SgdState,
}

impl Detector {
    /// Build a detector with freshly initialized parameters. Every branch
    /// is materialized regardless of mode, so two detectors built from the
    /// same seed are identical even when their configs toggle branches.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, streams::PARAMS);
        let params = model::init_params(&config, &mut rng);
        let optimizer = SgdState::new(&params);
        Ok(Detector {
            config,
            params,
            optimizer,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Element count of the mask branch alone.
    pub fn boxmask_parameter_count(&self) -> usize {
        self.params.elements_with_prefix("boxmask.")
    }

    pub fn parameter(&self, name: &str) -> Option<&ndarray::ArrayD<f64>> {
        self.params.position(name).map(|_| self.params.get(name))
    }

    pub fn set_parameter(&mut self, name: &str, value: ndarray::ArrayD<f64>) -> Result<()> {
        self.params.set(name, value)
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| n.to_string()).collect()
    }

    pub fn save(&self, bin_path: &std::path::Path) -> Result<()> {
        save_checkpoint(&self.params, bin_path)
    }

    pub fn load(&mut self, bin_path: &std::path::Path) -> Result<()> {
        load_checkpoint(&mut self.params, bin_path)
    }

    /// Single-frame backbone pass. The frame is `(H, W, 3)` in `[0, 1]`.
    pub fn backbone_forward(&self, frame: &Array3<f64>) -> Result<FeatureMap> {
        let (h, w, c) = frame.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch {
                expected: "(H, W, 3)".into(),
                got: format!("({h}, {w}, {c})"),
            });
        }
        let chw = Array3::from_shape_fn((3, h, w), |(ci, i, j)| frame[[i, j, ci]]);
        model::run_backbone_single(&self.params, &self.config, &chw)
    }

    /// Backbone over a whole clip, batched.
    pub fn compute_feature_maps(&self, frames: &[Array3<f32>]) -> Result<Vec<FeatureMap>> {
        if frames.is_empty() {
            return Err(Error::EmptyClip);
        }
        let chw: Vec<Array3<f64>> = frames.iter().map(model::frame_to_chw).collect();
        let state = pipeline::build_feature_maps(&self.params, &chw)?;
        let mut out = Vec::with_capacity(frames.len());
        let ids = std::iter::once(state.target_fmap).chain(state.support_fmaps.iter().copied());
        for id in ids {
            out.push(FeatureMap {
                values: state
                    .tape
                    .value(id)
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .to_owned(),
                stride: BACKBONE_STRIDE,
            });
        }
        Ok(out)
    }

    /// First-stage proposals for one feature map. In learned mode the RPN
    /// loss values are returned alongside (zero outside training).
    pub fn propose(
        &self,
        fmap: &FeatureMap,
        gt: &[LabeledBox],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ProposalSet, f64, f64)> {
        let frame_w = fmap.width() * fmap.stride;
        let frame_h = fmap.height() * fmap.stride;
        match self.config.proposal_mode {
            ProposalMode::OracleJitter => {
                let set = proposal::oracle_jitter_proposals(
                    gt,
                    frame_w,
                    frame_h,
                    self.config.proposal_count,
                    self.config.jitter,
                    rng,
                )?;
                Ok((set, 0.0, 0.0))
            }
            ProposalMode::LearnedRpn => {
                let mut tape = Tape::new();
                let binder = ParamBinder::new(&self.params);
                let target_fmap = tape.leaf(fmap.values.clone().into_dyn());
                let mut state = pipeline::ForwardState {
                    tape,
                    binder,
                    target_fmap,
                    support_fmaps: vec![],
                    frame_w,
                    frame_h,
                };
                let out =
                    pipeline::rpn_stage(&mut state, &self.params, gt, &self.config, training, rng)?;
                Ok((
                    out.proposals,
                    state.tape.scalar(out.l_cls),
                    state.tape.scalar(out.l_reg),
                ))
            }
        }
    }

    /// Detection and mask heads over aggregated RoI grids at `up_size`.
    /// Mask logits are produced only when the mask branch is enabled.
    pub fn heads_forward(
        &self,
        grids: &[RoiFeatureGrid],
    ) -> Result<(DetectionBatch, Option<Vec<MaskLogits>>)> {
        if grids.is_empty() {
            return Err(Error::NoRois);
        }
        let up = self.config.up_size;
        for g in grids {
            if g.size() != up || g.channels() != BACKBONE_CHANNELS {
                return Err(Error::ShapeMismatch {
                    expected: format!("({BACKBONE_CHANNELS}, {up}, {up}) aggregated grid"),
                    got: format!("({}, {}, {})", g.channels(), g.size(), g.size()),
                });
            }
        }
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&self.params);
        let ids: Vec<_> = grids
            .iter()
            .map(|g| tape.leaf(g.values.clone().into_dyn()))
            .collect();
        let stacked = tape.stack_grids(&ids);
        let (cls, reg) = model::detection_head_graph(&mut tape, &mut binder, &self.params, stacked);
        let class_logits = tape
            .value(cls)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let reg_values = tape.value(reg);
        let deltas = (0..grids.len())
            .map(|k| BoxDelta {
                dx: reg_values[[k, 0]],
                dy: reg_values[[k, 1]],
                dw: reg_values[[k, 2]],
                dh: reg_values[[k, 3]],
            })
            .collect();

        let mask_logits = if self.config.boxmask_enabled {
            let logits = model::boxmask_head_graph(
                &mut tape,
                &mut binder,
                &self.params,
                &self.config,
                stacked,
            );
            let v = tape
                .value(logits)
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .to_owned();
            Some(
                (0..grids.len())
                    .map(|k| v.index_axis(Axis(0), k).to_owned())
                    .collect(),
            )
        } else {
            None
        };
        Ok((
            DetectionBatch {
                class_logits,
                deltas,
            },
            mask_logits,
        ))
    }

    /// Loss terms for already-computed head outputs and targets.
    pub fn compute_losses(
        &self,
        batch: &DetectionBatch,
        labels: &[usize],
        reg_targets: &[Option<BoxDelta>],
        mask_logits: Option<&[MaskLogits]>,
        mask_targets: Option<&[LabelMask]>,
    ) -> Result<LossReport> {
        let k = batch.class_logits.nrows();
        if k == 0 || labels.len() != k || reg_targets.len() != k {
            return Err(Error::NoRois);
        }
        let mut tape = Tape::new();
        let cls = tape.leaf(batch.class_logits.clone().into_dyn());
        let l_cls = tape.softmax_ce_mean(cls, labels);

        let mut pred = Array2::<f64>::zeros((k, 4));
        for (i, d) in batch.deltas.iter().enumerate() {
            pred[[i, 0]] = d.dx;
            pred[[i, 1]] = d.dy;
            pred[[i, 2]] = d.dw;
            pred[[i, 3]] = d.dh;
        }
        let pred = tape.leaf(pred.into_dyn());
        let rois = SampledRois {
            boxes: vec![],
            labels: labels.to_vec(),
            deltas: reg_targets.to_vec(),
        };
        let l_reg = pipeline::regression_loss(&mut tape, pred, &rois);

        let l_bm = match (mask_logits, mask_targets) {
            (Some(logits), Some(targets)) => maskgen::boxmask_loss(logits, targets)?,
            _ => 0.0,
        };

        let l_cls = tape.scalar(l_cls);
        let l_reg = tape.scalar(l_reg);
        for (term, value) in [("l_cls", l_cls), ("l_reg", l_reg), ("l_bm", l_bm)] {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { term, value });
            }
        }
        Ok(LossReport {
            l_rpn_cls: 0.0,
            l_rpn_reg: 0.0,
            l_cls,
            l_reg,
            l_bm,
            l_total: l_cls + l_reg + self.config.lambda_bm * l_bm,
        })
    }

    /// One SGD step on a target frame of a clip. `support` holds support
    /// frame indices into `frames`.
    pub fn train_step(
        &mut self,
        frames: &[Array3<f32>],
        annotations: &[Vec<LabeledBox>],
        target: usize,
        support: &[usize],
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossReport> {
        self.train_step_inner(frames, annotations, target, support, lr, rng)
    }

    pub(crate) fn train_step_inner(
        &mut self,
        frames: &[Array3<f32>],
        annotations: &[Vec<LabeledBox>],
        target: usize,
        support: &[usize],
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossReport> {
        pipeline::train_step_impl(self, frames, annotations, target, support, lr, rng)
    }

    /// Loss report and per-parameter gradients for one step, leaving the
    /// parameters untouched. Gradients come back as `(name, grad)` pairs in
    /// canonical order; parameters unreachable from the loss are omitted.
    pub fn loss_and_gradients(
        &self,
        frames: &[Array3<f32>],
        annotations: &[Vec<LabeledBox>],
        target: usize,
        support: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(LossReport, Vec<(String, ndarray::ArrayD<f64>)>)> {
        let (report, grads) =
            pipeline::eval_step(self, frames, annotations, target, support, rng)?;
        let named = self
            .params
            .iter()
            .zip(grads)
            .filter_map(|((name, _), g)| g.map(|g| (name.to_string(), g)))
            .collect();
        Ok((report, named))
    }

    /// Detect objects on the target frame of a clip under a sampling plan.
    pub fn infer(
        &self,
        clip: &VideoClip,
        target: usize,
        plan: &SamplingPlan,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<ScoredBox>> {
        if clip.is_empty() {
            return Err(Error::EmptyClip);
        }
        if target >= clip.len() {
            return Err(Error::TargetOutOfRange {
                target,
                video_len: clip.len(),
            });
        }
        let support = sample_support(clip.len(), target, plan)?;
        let mut frames = Vec::with_capacity(1 + support.len());
        frames.push(clip.frames[target].clone());
        for &s in &support {
            frames.push(clip.frames[s].clone());
        }
        let fmaps = self.compute_feature_maps(&frames)?;
        pipeline::infer_impl(self, &fmaps, &clip.annotations[target], rng)
    }

    /// Inference over precomputed feature maps (target first).
    pub fn infer_with_feature_maps(
        &self,
        fmaps: &[FeatureMap],
        gt_for_oracle: &[LabeledBox],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<ScoredBox>> {
        pipeline::infer_impl(self, fmaps, gt_for_oracle, rng)
    }

    /// Aggregated RoI grids for head-level experiments.
    pub fn aggregate_rois_for(
        &self,
        fmaps: &[FeatureMap],
        rois: &[crate::geometry::Box],
    ) -> Result<Vec<RoiFeatureGrid>> {
        let mut tape = Tape::new();
        let binder = ParamBinder::new(&self.params);
        let target_fmap = tape.leaf(fmaps[0].values.clone().into_dyn());
        let support_fmaps = fmaps[1..]
            .iter()
            .map(|f| tape.leaf(f.values.clone().into_dyn()))
            .collect();
        let mut state = pipeline::ForwardState {
            tape,
            binder,
            target_fmap,
            support_fmaps,
            frame_w: fmaps[0].width() * fmaps[0].stride,
            frame_h: fmaps[0].height() * fmaps[0].stride,
        };
        let grids = pipeline::aggregate_rois(&mut state, &self.params, &self.config, rois)?;
        let v = state
            .tape
            .value(grids)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        Ok((0..rois.len())
            .map(|k| RoiFeatureGrid {
                values: v.index_axis(Axis(0), k).to_owned(),
                source: GridSource::Aggregated,
            })
            .collect())
    }
}
