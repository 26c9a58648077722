//! RoI feature extraction and temporal aggregation.
//!
//! A target RoI is pooled from its frame's feature map by bilinear RoIAlign.
//! For every support frame, each bin of the target grid is matched to the
//! most cosine-similar spatial position of the support feature map and the
//! feature column at that position is gathered into a pseudo-RoI grid.
//! Target and matched grids are then fused per bin by a single residual
//! multi-head self-attention layer: queries come from the target bins,
//! keys/values from the target bins concatenated with all matched bins.
//!
//! Similarity uses L2-normalized dot products, so it is invariant to
//! positive per-map scaling; zero-norm vectors compare as 0, and argmax
//! ties go to the lowest flattened spatial index.

use crate::autograd::{AlignRegion, Tape, VarId};
use crate::error::{Error, Result};
use crate::geometry::Box;
use ndarray::{Array1, Array2, Array3, Ix3, Ix4};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Spatial feature grid for one frame, `(C, H, W)`, with the downscale
/// factor relative to the input frame.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridSource {
    Target,
    Support,
    Aggregated,
}

/// Pooled per-RoI feature grid, `(C, P, P)`.
#[derive(Debug, Clone)]
pub struct RoiFeatureGrid {
    pub values: Array3<f64>,
    pub source: GridSource,
}

impl RoiFeatureGrid {
    pub fn size(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }
}

/// Cosine similarities of one query vector against every spatial position
/// of a support map; values lie in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct SimilarityMap {
    pub values: Array2<f64>,
}

/// Map an image-space RoI into feature-map coordinates, clipping to the
/// frame. Errors when the RoI misses the frame entirely.
pub fn roi_to_fmap_region(roi: &Box, fmap: &FeatureMap) -> Result<AlignRegion> {
    let frame_w = fmap.width() * fmap.stride;
    let frame_h = fmap.height() * fmap.stride;
    let clipped = roi
        .clip_to_frame(frame_w, frame_h)
        .ok_or(Error::RoiOutsideFrame {
            x1: roi.x1,
            y1: roi.y1,
            x2: roi.x2,
            y2: roi.y2,
            w: frame_w,
            h: frame_h,
        })?;
    let s = fmap.stride as f64;
    Ok(AlignRegion {
        x1: clipped.x1 / s,
        y1: clipped.y1 / s,
        x2: clipped.x2 / s,
        y2: clipped.y2 / s,
    })
}

/// Bilinear RoIAlign into a `roi_size` grid (2x2 sample points per bin,
/// averaged), bilinearly upsampled to `up_size` when the two differ.
pub fn extract_roi_features(
    fmap: &FeatureMap,
    roi: &Box,
    roi_size: usize,
    up_size: usize,
) -> Result<RoiFeatureGrid> {
    if roi_size == 0 || up_size < roi_size {
        return Err(Error::InvalidConfig(format!(
            "roi_size {roi_size} / up_size {up_size} must satisfy 1 <= roi_size <= up_size"
        )));
    }
    let region = roi_to_fmap_region(roi, fmap)?;
    let mut tape = Tape::new();
    let f = tape.leaf(fmap.values.clone().into_dyn());
    let aligned = tape.roi_align(f, &[region], roi_size);
    let out = if up_size != roi_size {
        tape.bilinear_resize(aligned, up_size, up_size)
    } else {
        aligned
    };
    let values = tape
        .value(out)
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .index_axis(ndarray::Axis(0), 0)
        .to_owned();
    Ok(RoiFeatureGrid {
        values,
        source: GridSource::Target,
    })
}

/// Cosine similarity of `query` against every spatial position of `fmap`.
pub fn cosine_similarity_map(query: &[f64], fmap: &FeatureMap) -> Result<SimilarityMap> {
    let (c, h, w) = fmap.values.dim();
    if query.len() != c {
        return Err(Error::ShapeMismatch {
            expected: format!("query of {c} channels"),
            got: format!("{}", query.len()),
        });
    }
    let qn: f64 = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut values = Array2::<f64>::zeros((h, w));
    for hi in 0..h {
        for wi in 0..w {
            let mut dot = 0.0;
            let mut nn = 0.0;
            for ci in 0..c {
                let v = fmap.values[[ci, hi, wi]];
                dot += query[ci] * v;
                nn += v * v;
            }
            let denom = qn * nn.sqrt();
            values[[hi, wi]] = if denom > 0.0 { dot / denom } else { 0.0 };
        }
    }
    Ok(SimilarityMap { values })
}

/// Argmax position per target bin, row-major over the grid. Ties resolve
/// to the lowest flattened index.
pub fn match_positions(
    target: &RoiFeatureGrid,
    support: &FeatureMap,
) -> Result<Vec<(usize, usize)>> {
    let (c, p, _) = target.values.dim();
    if support.channels() != c {
        return Err(Error::ShapeMismatch {
            expected: format!("support map with {c} channels"),
            got: format!("{}", support.channels()),
        });
    }
    let w = support.width();
    let mut positions = Vec::with_capacity(p * p);
    for i in 0..p {
        for j in 0..p {
            let query: Vec<f64> = (0..c).map(|ci| target.values[[ci, i, j]]).collect();
            let sim = cosine_similarity_map(&query, support)?;
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0usize;
            for (flat, &v) in sim.values.iter().enumerate() {
                if v > best {
                    best = v;
                    best_idx = flat;
                }
            }
            positions.push((best_idx / w, best_idx % w));
        }
    }
    Ok(positions)
}

/// Argmax positions for many RoI grids against one support map in a single
/// pass: support columns are L2-normalized once and all bins of all grids
/// form one query matrix. Equivalent to [`match_positions`] per grid.
pub fn match_positions_batch(
    grids: &[RoiFeatureGrid],
    support: &FeatureMap,
) -> Result<Vec<Vec<(usize, usize)>>> {
    if grids.is_empty() {
        return Ok(vec![]);
    }
    let (c, p, _) = grids[0].values.dim();
    if support.channels() != c {
        return Err(Error::ShapeMismatch {
            expected: format!("support map with {c} channels"),
            got: format!("{}", support.channels()),
        });
    }
    let (_, h, w) = support.values.dim();
    let positions = h * w;

    // normalized support columns, (positions, C); zero-norm columns stay 0
    let mut s = Array2::<f64>::zeros((positions, c));
    for hi in 0..h {
        for wi in 0..w {
            let mut nn = 0.0;
            for ci in 0..c {
                let v = support.values[[ci, hi, wi]];
                nn += v * v;
            }
            if nn > 0.0 {
                let inv = 1.0 / nn.sqrt();
                for ci in 0..c {
                    s[[hi * w + wi, ci]] = support.values[[ci, hi, wi]] * inv;
                }
            }
        }
    }

    // all bins of all grids as one query matrix (K*P*P, C), rows normalized
    let bins = p * p;
    let mut q = Array2::<f64>::zeros((grids.len() * bins, c));
    for (k, g) in grids.iter().enumerate() {
        for i in 0..p {
            for j in 0..p {
                let row = k * bins + i * p + j;
                let mut nn = 0.0;
                for ci in 0..c {
                    let v = g.values[[ci, i, j]];
                    nn += v * v;
                }
                if nn > 0.0 {
                    let inv = 1.0 / nn.sqrt();
                    for ci in 0..c {
                        q[[row, ci]] = g.values[[ci, i, j]] * inv;
                    }
                }
            }
        }
    }

    let sims = q.dot(&s.t()); // (K*P*P, positions)
    let mut out = Vec::with_capacity(grids.len());
    for k in 0..grids.len() {
        let mut grid_pos = Vec::with_capacity(bins);
        for b in 0..bins {
            let row = sims.row(k * bins + b);
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0usize;
            for (flat, &v) in row.iter().enumerate() {
                if v > best {
                    best = v;
                    best_idx = flat;
                }
            }
            grid_pos.push((best_idx / w, best_idx % w));
        }
        out.push(grid_pos);
    }
    Ok(out)
}

/// Gather the best-matching support features for each target bin into a
/// pseudo-RoI grid.
pub fn match_support_features(
    target: &RoiFeatureGrid,
    support: &FeatureMap,
) -> Result<RoiFeatureGrid> {
    let positions = match_positions(target, support)?;
    let p = target.size();
    let mut tape = Tape::new();
    let f = tape.leaf(support.values.clone().into_dyn());
    let matched = tape.gather_positions(f, &positions, p);
    Ok(RoiFeatureGrid {
        values: tape
            .value(matched)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .to_owned(),
        source: GridSource::Support,
    })
}

/// Learned projections of the attention layer.
#[derive(Debug, Clone)]
pub struct MsaWeights {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
}

impl MsaWeights {
    /// Identity projections with zero biases.
    pub fn identity(channels: usize) -> Self {
        let eye = Array2::eye(channels);
        let zero = Array1::zeros(channels);
        MsaWeights {
            wq: eye.clone(),
            bq: zero.clone(),
            wk: eye.clone(),
            bk: zero.clone(),
            wv: eye.clone(),
            bv: zero.clone(),
            wo: eye,
            bo: zero,
        }
    }

    /// Small-uniform init scaled by fan-in, zero biases.
    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let a = 1.0 / (channels as f64).sqrt();
        let mut w = || Array2::from_shape_fn((channels, channels), |_| rng.gen_range(-a..a));
        let wq = w();
        let wk = w();
        let wv = w();
        let wo = w();
        let zero = Array1::zeros(channels);
        MsaWeights {
            wq,
            bq: zero.clone(),
            wk,
            bk: zero.clone(),
            wv,
            bv: zero.clone(),
            wo,
            bo: zero,
        }
    }
}

/// Tape nodes of the eight projection parameters.
#[derive(Debug, Clone, Copy)]
pub struct MsaVars {
    pub wq: VarId,
    pub bq: VarId,
    pub wk: VarId,
    pub bk: VarId,
    pub wv: VarId,
    pub bv: VarId,
    pub wo: VarId,
    pub bo: VarId,
}

impl MsaVars {
    pub fn bind(tape: &mut Tape, w: &MsaWeights) -> Self {
        MsaVars {
            wq: tape.leaf(w.wq.clone().into_dyn()),
            bq: tape.leaf(w.bq.clone().into_dyn()),
            wk: tape.leaf(w.wk.clone().into_dyn()),
            bk: tape.leaf(w.bk.clone().into_dyn()),
            wv: tape.leaf(w.wv.clone().into_dyn()),
            bv: tape.leaf(w.bv.clone().into_dyn()),
            wo: tape.leaf(w.wo.clone().into_dyn()),
            bo: tape.leaf(w.bo.clone().into_dyn()),
        }
    }
}

/// Residual multi-head self-attention over RoI bins, on an existing tape.
/// `target` and each element of `matched` are `(C, P, P)` nodes; the output
/// has the same shape as `target`.
pub fn msa_aggregate_on_tape(
    tape: &mut Tape,
    target: VarId,
    matched: &[VarId],
    vars: &MsaVars,
    heads: usize,
) -> VarId {
    let shape = tape.value(target).shape().to_vec();
    let (c, p, q) = (shape[0], shape[1], shape[2]);
    assert_eq!(c % heads, 0, "channel count must divide head count");
    for &m in matched {
        assert_eq!(tape.value(m).shape(), &shape[..], "matched grid shape mismatch");
    }
    let head_dim = c / heads;

    let x_t = tape.grid_to_tokens(target);
    let mut kv_parts = vec![x_t];
    for &m in matched {
        kv_parts.push(tape.grid_to_tokens(m));
    }
    let kv = if kv_parts.len() == 1 {
        kv_parts[0]
    } else {
        tape.concat_rows(&kv_parts)
    };

    let qs = tape.linear(x_t, vars.wq, vars.bq);
    let ks = tape.linear(kv, vars.wk, vars.bk);
    let vs = tape.linear(kv, vars.wv, vars.bv);

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let qh = tape.slice_cols(qs, lo, hi);
        let kh = tape.slice_cols(ks, lo, hi);
        let vh = tape.slice_cols(vs, lo, hi);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        head_outs.push(tape.matmul(attn, vh));
    }
    let concat = if head_outs.len() == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)
    };
    let projected = tape.linear(concat, vars.wo, vars.bo);
    let residual = tape.add(x_t, projected);
    tape.tokens_to_grid(residual, p, q)
}

/// Pure-value wrapper around [`msa_aggregate_on_tape`].
pub fn msa_aggregate(
    target: &RoiFeatureGrid,
    matched: &[RoiFeatureGrid],
    weights: &MsaWeights,
    heads: usize,
) -> Result<RoiFeatureGrid> {
    let c = target.channels();
    for m in matched {
        if m.channels() != c || m.size() != target.size() {
            return Err(Error::ShapeMismatch {
                expected: format!("matched grid ({c}, {}, {})", target.size(), target.size()),
                got: format!("({}, {}, {})", m.channels(), m.size(), m.size()),
            });
        }
    }
    if c % heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "{c} channels not divisible into {heads} heads"
        )));
    }
    let mut tape = Tape::new();
    let t = tape.leaf(target.values.clone().into_dyn());
    let m_ids: Vec<VarId> = matched
        .iter()
        .map(|m| tape.leaf(m.values.clone().into_dyn()))
        .collect();
    let vars = MsaVars::bind(&mut tape, weights);
    let out = msa_aggregate_on_tape(&mut tape, t, &m_ids, &vars, heads);
    Ok(RoiFeatureGrid {
        values: tape
            .value(out)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .to_owned(),
        source: GridSource::Aggregated,
    })
}
