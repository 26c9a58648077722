//! Axis-aligned box arithmetic shared by proposal generation, the detection
//! head, and the evaluator: IoU, greedy per-class NMS, and the center-offset /
//! log-scale delta parameterization used for box regression.
//!
//! Coordinate convention: continuous boxes with `(x1, y1)` the inclusive
//! top-left corner and half-open semantics when rasterizing (a point `p`
//! is inside iff `x1 <= p.x < x2` and `y1 <= p.y < y2`).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Log-scale deltas are clamped here before exponentiation so a wild early
/// prediction cannot decode into an astronomically large box.
pub const DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000/16)

/// Axis-aligned box, `x1 < x2`, `y1 < y2`, all coordinates finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Box { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox {
                x1,
                y1,
                x2,
                y2,
                reason: "non-finite coordinate",
            });
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox {
                x1,
                y1,
                x2,
                y2,
                reason: "empty extent",
            });
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Half-open membership test for a point.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    /// Intersection with another box, `None` when disjoint.
    pub fn intersect(&self, other: &Box) -> Option<Box> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        if x1 < x2 && y1 < y2 {
            Some(Box { x1, y1, x2, y2 })
        } else {
            None
        }
    }

    /// Clip to a `w`x`h` frame, `None` when nothing remains.
    pub fn clip_to_frame(&self, w: usize, h: usize) -> Option<Box> {
        self.intersect(&Box {
            x1: 0.0,
            y1: 0.0,
            x2: w as f64,
            y2: h as f64,
        })
    }
}

/// Ground-truth box with a class label in `[1, L]` (0 is background).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub rect: Box,
    pub label: usize,
}

/// A detection: box, confidence in `[0, 1]`, class label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub rect: Box,
    pub score: f64,
    pub label: usize,
}

/// Center-offset / log-scale box regression parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn is_finite(&self) -> bool {
        [self.dx, self.dy, self.dw, self.dh]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Intersection-over-union of two boxes. Zero when disjoint.
pub fn iou(a: &Box, b: &Box) -> Result<f64> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(Error::DegenerateBox);
    }
    let inter = a.intersect(b).map_or(0.0, |ib| ib.area());
    Ok(inter / (a.area() + b.area() - inter))
}

/// Greedy per-class non-maximum suppression.
///
/// Detections are visited in descending score order (ties broken by lower
/// original index); a detection is suppressed when its IoU with an already
/// kept detection of the same class exceeds `iou_thresh`. Returns the kept
/// indices into `dets`, in the order they were kept.
pub fn nms(dets: &[ScoredBox], iou_thresh: f64) -> Result<Vec<usize>> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::InvalidIouThreshold(iou_thresh));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let mut suppressed = false;
        for &k in &kept {
            if dets[k].label == dets[i].label
                && iou(&dets[k].rect, &dets[i].rect)? > iou_thresh
            {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Encode the regression target that maps `proposal` onto `gt`.
pub fn encode(proposal: &Box, gt: &Box) -> BoxDelta {
    let (px, py) = proposal.center();
    let (gx, gy) = gt.center();
    BoxDelta {
        dx: (gx - px) / proposal.width(),
        dy: (gy - py) / proposal.height(),
        dw: (gt.width() / proposal.width()).ln(),
        dh: (gt.height() / proposal.height()).ln(),
    }
}

/// Apply a delta to a proposal. Log-scale components are clamped to
/// [`DELTA_CLAMP`] before exponentiation; no frame clipping is applied.
pub fn decode(proposal: &Box, delta: &BoxDelta) -> Result<Box> {
    if !delta.is_finite() {
        return Err(Error::NonFiniteDelta {
            dx: delta.dx,
            dy: delta.dy,
            dw: delta.dw,
            dh: delta.dh,
        });
    }
    let (px, py) = proposal.center();
    let cx = px + delta.dx * proposal.width();
    let cy = py + delta.dy * proposal.height();
    let w = proposal.width() * delta.dw.clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let h = proposal.height() * delta.dh.clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    Box::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// [`decode`] followed by clipping into a `w`x`h` frame. Errors when the
/// decoded box falls entirely outside the frame.
pub fn decode_clamped(proposal: &Box, delta: &BoxDelta, w: usize, h: usize) -> Result<Box> {
    let b = decode(proposal, delta)?;
    b.clip_to_frame(w, h).ok_or(Error::RoiOutsideFrame {
        x1: b.x1,
        y1: b.y1,
        x2: b.x2,
        y2: b.y2,
        w,
        h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> Box {
        Box::new(x1, y1, x2, y2).unwrap()
    }

    /// O(n^2) reference suppressor: for each detection in score order,
    /// checks every previously kept same-class detection.
    fn nms_reference(dets: &[ScoredBox], thresh: f64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| {
            dets[b]
                .score
                .partial_cmp(&dets[a].score)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut kept = Vec::new();
        'outer: for &i in &order {
            for &k in &kept {
                let k: usize = k;
                if dets[k].label == dets[i].label {
                    let a = &dets[k].rect;
                    let b = &dets[i].rect;
                    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
                    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
                    let inter = ix * iy;
                    let union = a.area() + b.area() - inter;
                    if inter / union > thresh {
                        continue 'outer;
                    }
                }
            }
            kept.push(i);
        }
        kept
    }

    #[test]
    fn iou_identity() {
        let b = bx(2.0, 3.0, 9.0, 11.0);
        assert_eq!(iou(&b, &b).unwrap(), 1.0);
    }

    #[test]
    fn iou_disjoint() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        let b = bx(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_hand_case() {
        // Intersection 5x5 = 25, union 100 + 100 - 25 = 175.
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(5.0, 5.0, 15.0, 15.0);
        assert!((iou(&a, &b).unwrap() - 25.0 / 175.0).abs() < 1e-12);
    }

    #[test]
    fn iou_symmetry_and_range() {
        let a = bx(1.0, 1.0, 4.0, 6.0);
        let b = bx(2.0, 0.0, 7.0, 5.0);
        let ab = iou(&a, &b).unwrap();
        let ba = iou(&b, &a).unwrap();
        assert_eq!(ab, ba);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        let degenerate = Box {
            x1: 0.0,
            y1: 0.0,
            x2: 0.0,
            y2: 1.0,
        };
        assert!(iou(&a, &degenerate).is_err());
    }

    #[test]
    fn nms_single_detection() {
        let dets = [ScoredBox {
            rect: bx(0.0, 0.0, 4.0, 4.0),
            score: 0.7,
            label: 1,
        }];
        assert_eq!(nms(&dets, 0.5).unwrap(), vec![0]);
    }

    #[test]
    fn nms_identical_boxes_keep_higher_score() {
        let r = bx(0.0, 0.0, 4.0, 4.0);
        let dets = [
            ScoredBox {
                rect: r,
                score: 0.8,
                label: 1,
            },
            ScoredBox {
                rect: r,
                score: 0.9,
                label: 1,
            },
        ];
        assert_eq!(nms(&dets, 0.5).unwrap(), vec![1]);
    }

    #[test]
    fn nms_is_per_class() {
        let r = bx(0.0, 0.0, 4.0, 4.0);
        let dets = [
            ScoredBox {
                rect: r,
                score: 0.9,
                label: 1,
            },
            ScoredBox {
                rect: r,
                score: 0.8,
                label: 2,
            },
        ];
        let mut kept = nms(&dets, 0.5).unwrap();
        kept.sort_unstable();
        assert_eq!(kept, vec![0, 1]);
    }

    #[test]
    fn nms_empty_input() {
        assert!(nms(&[], 0.5).unwrap().is_empty());
    }

    #[test]
    fn nms_rejects_bad_threshold() {
        assert!(nms(&[], 0.0).is_err());
        assert!(nms(&[], 1.5).is_err());
    }

    #[test]
    fn nms_matches_brute_force_on_random_boxes() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(11, 900);
        for _ in 0..20 {
            let dets: Vec<ScoredBox> = (0..200)
                .map(|_| {
                    let x1 = rng.gen_range(0.0..50.0);
                    let y1 = rng.gen_range(0.0..50.0);
                    ScoredBox {
                        rect: bx(x1, y1, x1 + rng.gen_range(2.0..20.0), y1 + rng.gen_range(2.0..20.0)),
                        score: rng.gen_range(0.0..1.0),
                        label: rng.gen_range(1..4),
                    }
                })
                .collect();
            assert_eq!(nms(&dets, 0.5).unwrap(), nms_reference(&dets, 0.5));
        }
    }

    #[test]
    fn encode_identity_is_zero() {
        let b = bx(3.0, 4.0, 10.0, 12.0);
        let d = encode(&b, &b);
        assert_eq!(d, BoxDelta::ZERO);
    }

    #[test]
    fn decode_zero_delta_is_identity() {
        let b = bx(3.0, 4.0, 10.0, 12.0);
        let out = decode(&b, &BoxDelta::ZERO).unwrap();
        assert!((out.x1 - b.x1).abs() < 1e-12);
        assert!((out.y2 - b.y2).abs() < 1e-12);
    }

    #[test]
    fn decode_rejects_non_finite() {
        let b = bx(0.0, 0.0, 4.0, 4.0);
        let d = BoxDelta {
            dx: f64::NAN,
            dy: 0.0,
            dw: 0.0,
            dh: 0.0,
        };
        assert!(decode(&b, &d).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(
            px1 in 0.0..50.0f64, py1 in 0.0..50.0f64,
            pw in 1.0..30.0f64, ph in 1.0..30.0f64,
            gx1 in 0.0..50.0f64, gy1 in 0.0..50.0f64,
            gw in 1.0..30.0f64, gh in 1.0..30.0f64,
        ) {
            let p = bx(px1, py1, px1 + pw, py1 + ph);
            let g = bx(gx1, gy1, gx1 + gw, gy1 + gh);
            let back = decode(&p, &encode(&p, &g)).unwrap();
            prop_assert!((back.x1 - g.x1).abs() <= 1e-6);
            prop_assert!((back.y1 - g.y1).abs() <= 1e-6);
            prop_assert!((back.x2 - g.x2).abs() <= 1e-6);
            prop_assert!((back.y2 - g.y2).abs() <= 1e-6);
        }

        #[test]
        fn nms_order_invariant_without_ties(seed in 0u64..200) {
            use rand::Rng;
            let mut rng = crate::rng::stream_rng(seed, 901);
            let mut dets: Vec<ScoredBox> = (0..30)
                .map(|i| {
                    let x1 = rng.gen_range(0.0..40.0);
                    let y1 = rng.gen_range(0.0..40.0);
                    ScoredBox {
                        rect: bx(x1, y1, x1 + rng.gen_range(2.0..15.0), y1 + rng.gen_range(2.0..15.0)),
                        // distinct scores so ordering is unambiguous
                        score: (i as f64 + 1.0) / 32.0 + rng.gen_range(0.0..0.01),
                        label: rng.gen_range(1..3),
                    }
                })
                .collect();
            let kept_a: std::collections::BTreeSet<ScoredBoxKey> =
                nms(&dets, 0.5).unwrap().iter().map(|&i| key(&dets[i])).collect();
            dets.reverse();
            let kept_b: std::collections::BTreeSet<ScoredBoxKey> =
                nms(&dets, 0.5).unwrap().iter().map(|&i| key(&dets[i])).collect();
            prop_assert_eq!(kept_a, kept_b);
        }
    }

    type ScoredBoxKey = (u64, u64, u64, u64, u64, usize);

    fn key(d: &ScoredBox) -> ScoredBoxKey {
        (
            d.rect.x1.to_bits(),
            d.rect.y1.to_bits(),
            d.rect.x2.to_bits(),
            d.rect.y2.to_bits(),
            d.score.to_bits(),
            d.label,
        )
    }
}
