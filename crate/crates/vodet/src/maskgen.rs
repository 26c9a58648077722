//! Coarse per-RoI class masks from bounding-box annotations, and the
//! per-pixel cross-entropy that supervises the mask branch.
//!
//! A mask cell takes the class of the smallest-area box whose interior
//! contains the cell center (smaller boxes sit in front of larger ones);
//! cells covered by no box are background (0). Equal-area overlaps go to
//! the box that appears earlier in the annotation list. Membership is
//! decided by the cell center alone with half-open box semantics.
//!
//! The loss averages over every cell of every RoI: the per-RoI sum of
//! per-cell cross-entropies divided by `num_rois * m^2`. (The per-pixel
//! normalization is written ambiguously in most treatments; averaging over
//! all cells is the reading implemented and tested here.)

use crate::error::{Error, Result};
use crate::geometry::{Box, LabeledBox};
use ndarray::{Array2, Array3};

/// Integer class map of resolution `m x m` over `L + 1` classes
/// (0 is background).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    labels: Array2<u32>,
    num_classes: usize,
}

impl LabelMask {
    pub fn new(labels: Array2<u32>, num_classes: usize) -> Result<Self> {
        if labels.nrows() != labels.ncols() || labels.nrows() == 0 {
            return Err(Error::ShapeMismatch {
                expected: "square non-empty label grid".into(),
                got: format!("{}x{}", labels.nrows(), labels.ncols()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&v| v as usize > num_classes) {
            return Err(Error::InvalidConfig(format!(
                "mask label {bad} exceeds class count {num_classes}"
            )));
        }
        Ok(LabelMask {
            labels,
            num_classes,
        })
    }

    pub fn resolution(&self) -> usize {
        self.labels.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    pub fn label_at(&self, row: usize, col: usize) -> u32 {
        self.labels[[row, col]]
    }
}

/// Per-RoI class scores of shape `(L+1, m, m)`.
pub type MaskLogits = Array3<f64>;

/// Rasterize labeled boxes onto an `m x m` cell grid spanning `region`.
pub fn rasterize_label_map(boxes: &[LabeledBox], region: &Box, m: usize) -> Result<LabelMask> {
    assert!(m >= 1, "mask resolution must be at least 1");
    let num_classes = boxes.iter().map(|b| b.label).max().unwrap_or(0);
    let cell_w = region.width() / m as f64;
    let cell_h = region.height() / m as f64;
    let mut labels = Array2::<u32>::zeros((m, m));
    for i in 0..m {
        let cy = region.y1 + (i as f64 + 0.5) * cell_h;
        for j in 0..m {
            let cx = region.x1 + (j as f64 + 0.5) * cell_w;
            let mut best_area = f64::INFINITY;
            let mut best_label = 0u32;
            for b in boxes {
                if b.rect.contains(cx, cy) && b.rect.area() < best_area {
                    best_area = b.rect.area();
                    best_label = b.label as u32;
                }
            }
            labels[[i, j]] = best_label;
        }
    }
    LabelMask::new(labels, num_classes.max(1))
}

/// One target mask per RoI; every ground-truth box participates and is
/// effectively intersected with the RoI by the cell-center rule.
pub fn build_roi_targets(rois: &[Box], gt: &[LabeledBox], m: usize) -> Result<Vec<LabelMask>> {
    rois.iter()
        .map(|roi| rasterize_label_map(gt, roi, m))
        .collect()
}

/// Mean softmax cross-entropy over all RoIs and all cells.
pub fn boxmask_loss(logits: &[MaskLogits], targets: &[LabelMask]) -> Result<f64> {
    Ok(boxmask_loss_with_grad(logits, targets)?.0)
}

/// Loss plus its gradient with respect to each RoI's logits.
pub fn boxmask_loss_with_grad(
    logits: &[MaskLogits],
    targets: &[LabelMask],
) -> Result<(f64, Vec<Array3<f64>>)> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} mask targets, at least one RoI", targets.len()),
            got: format!("{} logit grids", logits.len()),
        });
    }
    let (c, m, m2) = logits[0].dim();
    let total_cells = (logits.len() * m * m) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (lg, tg) in logits.iter().zip(targets.iter()) {
        if lg.dim() != (c, m, m2) || m != m2 || tg.resolution() != m {
            return Err(Error::ShapeMismatch {
                expected: format!("logits ({c},{m},{m}) matching target {}", tg.resolution()),
                got: format!("{:?}", lg.dim()),
            });
        }
        let mut grad = Array3::<f64>::zeros((c, m, m));
        for i in 0..m {
            for j in 0..m {
                let target = tg.label_at(i, j) as usize;
                let mut max = f64::NEG_INFINITY;
                for ci in 0..c {
                    max = max.max(lg[[ci, i, j]]);
                }
                let mut denom = 0.0;
                for ci in 0..c {
                    denom += (lg[[ci, i, j]] - max).exp();
                }
                let log_denom = denom.ln() + max;
                loss += log_denom - lg[[target, i, j]];
                for ci in 0..c {
                    let p = (lg[[ci, i, j]] - log_denom).exp();
                    grad[[ci, i, j]] =
                        (p - if ci == target { 1.0 } else { 0.0 }) / total_cells;
                }
            }
        }
        grads.push(grad);
    }
    Ok((loss / total_cells, grads))
}
