//! Architecture: a 4-layer stride-8 backbone, a single-scale RPN, the
//! pooled detection head (classification + class-agnostic regression), and
//! the mask branch (3x3 conv stack at 64 channels, 2x2 stride-2
//! deconvolution, 1x1 classifier). Parameter creation order is fixed and
//! shared by every proposal mode so checkpoints and RNG streams never
//! depend on which branches are in use.

use crate::autograd::{Tape, VarId};
use crate::error::{Error, Result};
use crate::features::MsaVars;
use ndarray::{Array3, Array4, Ix3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamBinder, ParamStore};

pub const BACKBONE_CHANNELS: usize = 32;
pub const BACKBONE_STRIDE: usize = 8;
pub const HEAD_HIDDEN: usize = 64;
pub const BOXMASK_CHANNELS: usize = 64;
/// Side length of the single square anchor, in input pixels.
pub const ANCHOR_SIZE: f64 = 20.0;
pub const MIN_FRAME_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalMode {
    OracleJitter,
    LearnedRpn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Foreground class count L; predictions span L+1 with background 0.
    pub num_classes: usize,
    /// Weight of the mask loss in the total loss.
    pub lambda_bm: f64,
    /// Mask output resolution m; must equal `2 * up_size`.
    pub mask_resolution: usize,
    /// Number of 3x3 convolutions in the mask branch.
    pub n_conv: usize,
    pub roi_size: usize,
    pub up_size: usize,
    pub proposal_mode: ProposalMode,
    pub boxmask_enabled: bool,
    /// Restrict the mask loss to positive RoIs (default: all sampled RoIs).
    pub boxmask_positives_only: bool,
    pub learning_rate: f64,
    pub momentum: f64,
    /// 1-based epochs at which the learning rate is divided by 10.
    pub decay_epochs: Vec<usize>,
    pub nms_iou: f64,
    pub score_thresh: f64,
    /// Proposals per target frame.
    pub proposal_count: usize,
    /// RoIs sampled per target frame for the losses.
    pub roi_batch: usize,
    /// Oracle-proposal jitter as a fraction of box size.
    pub jitter: f64,
    pub msa_heads: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_classes: 3,
            lambda_bm: 0.5,
            mask_resolution: 28,
            n_conv: 1,
            roi_size: 7,
            up_size: 14,
            proposal_mode: ProposalMode::OracleJitter,
            boxmask_enabled: true,
            boxmask_positives_only: false,
            learning_rate: 0.02,
            momentum: 0.9,
            decay_epochs: vec![4, 6],
            nms_iou: 0.5,
            score_thresh: 0.05,
            proposal_count: 32,
            roi_batch: 32,
            jitter: 0.15,
            msa_heads: 2,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.lambda_bm < 0.0 {
            return bad(format!("lambda_bm {} must be >= 0", self.lambda_bm));
        }
        if self.n_conv == 0 {
            return bad("n_conv must be at least 1".into());
        }
        if self.roi_size == 0 || self.up_size < self.roi_size {
            return bad(format!(
                "roi_size {} / up_size {} must satisfy 1 <= roi_size <= up_size",
                self.roi_size, self.up_size
            ));
        }
        if self.mask_resolution % 2 != 0 {
            return bad(format!("mask resolution {} must be even", self.mask_resolution));
        }
        if self.mask_resolution != 2 * self.up_size {
            return bad(format!(
                "mask resolution {} must equal 2 * up_size = {} (one stride-2 deconvolution)",
                self.mask_resolution,
                2 * self.up_size
            ));
        }
        if BACKBONE_CHANNELS % self.msa_heads != 0 {
            return bad(format!(
                "{BACKBONE_CHANNELS} channels not divisible into {} heads",
                self.msa_heads
            ));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return bad(format!("nms_iou {} outside (0, 1]", self.nms_iou));
        }
        if self.proposal_count == 0 || self.roi_batch == 0 {
            return bad("proposal_count and roi_batch must be positive".into());
        }
        Ok(())
    }
}

/// Create every parameter in canonical order. All branches are always
/// materialized, so initialization consumes the same RNG stream regardless
/// of mode or the mask flag.
pub fn init_params<R: Rng>(config: &DetectorConfig, rng: &mut R) -> ParamStore {
    let c = BACKBONE_CHANNELS;
    let classes = config.num_classes + 1;
    let mut p = ParamStore::new();

    // backbone: three stride-2 convs then one stride-1, all 3x3
    p.insert_uniform("backbone.conv1.weight", &[c, 3, 3, 3], 3 * 9, rng);
    p.insert_zeros("backbone.conv1.bias", &[c]);
    p.insert_uniform("backbone.conv2.weight", &[c, c, 3, 3], c * 9, rng);
    p.insert_zeros("backbone.conv2.bias", &[c]);
    p.insert_uniform("backbone.conv3.weight", &[c, c, 3, 3], c * 9, rng);
    p.insert_zeros("backbone.conv3.bias", &[c]);
    p.insert_uniform("backbone.conv4.weight", &[c, c, 3, 3], c * 9, rng);
    p.insert_zeros("backbone.conv4.bias", &[c]);

    // region proposal branch (single-scale anchors, one per position)
    p.insert_uniform("rpn.conv.weight", &[c, c, 3, 3], c * 9, rng);
    p.insert_zeros("rpn.conv.bias", &[c]);
    p.insert_uniform("rpn.obj.weight", &[1, c, 1, 1], c, rng);
    p.insert_zeros("rpn.obj.bias", &[1]);
    p.insert_uniform("rpn.reg.weight", &[4, c, 1, 1], c, rng);
    p.insert_zeros("rpn.reg.bias", &[4]);

    // temporal aggregation projections
    for name in ["msa.wq", "msa.wk", "msa.wv", "msa.wo"] {
        p.insert_uniform(&format!("{name}.weight"), &[c, c], c, rng);
        p.insert_zeros(&format!("{name}.bias"), &[c]);
    }

    // detection head: pool -> fc1 -> fc2 -> {cls, reg}
    p.insert_uniform("head.fc1.weight", &[HEAD_HIDDEN, c], c, rng);
    p.insert_zeros("head.fc1.bias", &[HEAD_HIDDEN]);
    p.insert_uniform("head.fc2.weight", &[HEAD_HIDDEN, HEAD_HIDDEN], HEAD_HIDDEN, rng);
    p.insert_zeros("head.fc2.bias", &[HEAD_HIDDEN]);
    p.insert_uniform("head.cls.weight", &[classes, HEAD_HIDDEN], HEAD_HIDDEN, rng);
    p.insert_zeros("head.cls.bias", &[classes]);
    p.insert_uniform("head.reg.weight", &[4, HEAD_HIDDEN], HEAD_HIDDEN, rng);
    p.insert_zeros("head.reg.bias", &[4]);

    // mask branch: entry conv maps backbone channels up to the stack width,
    // remaining convs preserve it
    let bm = BOXMASK_CHANNELS;
    for i in 1..=config.n_conv {
        let cin = if i == 1 { c } else { bm };
        p.insert_uniform(&format!("boxmask.conv{i}.weight"), &[bm, cin, 3, 3], cin * 9, rng);
        p.insert_zeros(&format!("boxmask.conv{i}.bias"), &[bm]);
    }
    p.insert_uniform("boxmask.deconv.weight", &[bm, bm, 2, 2], bm * 4, rng);
    p.insert_zeros("boxmask.deconv.bias", &[bm]);
    p.insert_uniform("boxmask.out.weight", &[classes, bm, 1, 1], bm, rng);
    p.insert_zeros("boxmask.out.bias", &[classes]);

    p
}

/// Backbone over a batch of frames `(N, 3, H, W)`; output `(N, C, H/8, W/8)`.
pub fn backbone_graph(
    tape: &mut Tape,
    binder: &mut ParamBinder,
    store: &ParamStore,
    frames: VarId,
) -> VarId {
    let shape = tape.value(frames).shape().to_vec();
    debug_assert!(shape[2] >= MIN_FRAME_SIDE && shape[3] >= MIN_FRAME_SIDE);
    let mut x = frames;
    for (i, stride) in [(1usize, 2usize), (2, 2), (3, 2), (4, 1)] {
        let w = binder.var(tape, store, &format!("backbone.conv{i}.weight"));
        let b = binder.var(tape, store, &format!("backbone.conv{i}.bias"));
        x = tape.conv2d(x, w, b, stride, 1);
        x = tape.relu(x);
    }
    x
}

/// RPN over one feature map `(1, C, Hf, Wf)`: objectness logits
/// `(1, 1, Hf, Wf)` and deltas `(1, 4, Hf, Wf)`.
pub fn rpn_graph(
    tape: &mut Tape,
    binder: &mut ParamBinder,
    store: &ParamStore,
    fmap: VarId,
) -> (VarId, VarId) {
    let w = binder.var(tape, store, "rpn.conv.weight");
    let b = binder.var(tape, store, "rpn.conv.bias");
    let mut x = tape.conv2d(fmap, w, b, 1, 1);
    x = tape.relu(x);
    let wo = binder.var(tape, store, "rpn.obj.weight");
    let bo = binder.var(tape, store, "rpn.obj.bias");
    let obj = tape.conv2d(x, wo, bo, 1, 0);
    let wr = binder.var(tape, store, "rpn.reg.weight");
    let br = binder.var(tape, store, "rpn.reg.bias");
    let reg = tape.conv2d(x, wr, br, 1, 0);
    (obj, reg)
}

pub fn msa_vars(tape: &mut Tape, binder: &mut ParamBinder, store: &ParamStore) -> MsaVars {
    MsaVars {
        wq: binder.var(tape, store, "msa.wq.weight"),
        bq: binder.var(tape, store, "msa.wq.bias"),
        wk: binder.var(tape, store, "msa.wk.weight"),
        bk: binder.var(tape, store, "msa.wk.bias"),
        wv: binder.var(tape, store, "msa.wv.weight"),
        bv: binder.var(tape, store, "msa.wv.bias"),
        wo: binder.var(tape, store, "msa.wo.weight"),
        bo: binder.var(tape, store, "msa.wo.bias"),
    }
}

/// Detection head over stacked aggregated grids `(K, C, up, up)`:
/// class logits `(K, L+1)` and deltas `(K, 4)`.
pub fn detection_head_graph(
    tape: &mut Tape,
    binder: &mut ParamBinder,
    store: &ParamStore,
    grids: VarId,
) -> (VarId, VarId) {
    let pooled = tape.global_avg_pool(grids);
    let w1 = binder.var(tape, store, "head.fc1.weight");
    let b1 = binder.var(tape, store, "head.fc1.bias");
    let mut x = tape.linear(pooled, w1, b1);
    x = tape.relu(x);
    let w2 = binder.var(tape, store, "head.fc2.weight");
    let b2 = binder.var(tape, store, "head.fc2.bias");
    x = tape.linear(x, w2, b2);
    x = tape.relu(x);
    let wc = binder.var(tape, store, "head.cls.weight");
    let bc = binder.var(tape, store, "head.cls.bias");
    let cls = tape.linear(x, wc, bc);
    let wr = binder.var(tape, store, "head.reg.weight");
    let br = binder.var(tape, store, "head.reg.bias");
    let reg = tape.linear(x, wr, br);
    (cls, reg)
}

/// Mask branch over stacked aggregated grids `(K, C, up, up)`:
/// per-pixel class logits `(K, L+1, 2*up, 2*up)`.
pub fn boxmask_head_graph(
    tape: &mut Tape,
    binder: &mut ParamBinder,
    store: &ParamStore,
    config: &DetectorConfig,
    grids: VarId,
) -> VarId {
    let mut x = grids;
    for i in 1..=config.n_conv {
        let w = binder.var(tape, store, &format!("boxmask.conv{i}.weight"));
        let b = binder.var(tape, store, &format!("boxmask.conv{i}.bias"));
        x = tape.conv2d(x, w, b, 1, 1);
        x = tape.relu(x);
    }
    let wd = binder.var(tape, store, "boxmask.deconv.weight");
    let bd = binder.var(tape, store, "boxmask.deconv.bias");
    x = tape.conv_transpose2d(x, wd, bd, 2);
    x = tape.relu(x);
    let wo = binder.var(tape, store, "boxmask.out.weight");
    let bo = binder.var(tape, store, "boxmask.out.bias");
    tape.conv2d(x, wo, bo, 1, 0)
}

/// Convert an `(H, W, 3)` frame in `[0, 1]` to the `(3, H, W)` layout the
/// backbone consumes.
pub fn frame_to_chw(frame: &Array3<f32>) -> Array3<f64> {
    let (h, w, _) = frame.dim();
    Array3::from_shape_fn((3, h, w), |(c, i, j)| frame[[i, j, c]] as f64)
}

/// Batch frames `(N, 3, H, W)` for the backbone.
pub fn batch_frames(frames: &[Array3<f64>]) -> Result<Array4<f64>> {
    if frames.is_empty() {
        return Err(Error::EmptyClip);
    }
    let (c, h, w) = frames[0].dim();
    if h < MIN_FRAME_SIDE || w < MIN_FRAME_SIDE {
        return Err(Error::FrameTooSmall { w, h });
    }
    let mut out = Array4::<f64>::zeros((frames.len(), c, h, w));
    for (i, f) in frames.iter().enumerate() {
        if f.dim() != (c, h, w) {
            return Err(Error::ShapeMismatch {
                expected: format!("({c},{h},{w})"),
                got: format!("{:?}", f.dim()),
            });
        }
        out.index_axis_mut(ndarray::Axis(0), i).assign(f);
    }
    Ok(out)
}

/// Pure single-frame backbone pass (used by the public `backbone_forward`).
pub fn run_backbone_single(
    store: &ParamStore,
    config: &DetectorConfig,
    frame: &Array3<f64>,
) -> Result<crate::features::FeatureMap> {
    let _ = config;
    let batch = batch_frames(std::slice::from_ref(frame))?;
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(store);
    let input = tape.leaf(batch.into_dyn());
    let out = backbone_graph(&mut tape, &mut binder, store, input);
    let values = tape
        .value(out)
        .index_axis(ndarray::Axis(0), 0)
        .to_owned()
        .into_dimensionality::<Ix3>()
        .unwrap();
    Ok(crate::features::FeatureMap {
        values,
        stride: BACKBONE_STRIDE,
    })
}
