//! Detection matching and mean average precision.
//!
//! Matching is greedy and one-to-one per frame: detections in descending
//! score order claim the highest-IoU unmatched ground-truth box of the same
//! class at or above the IoU threshold. AP uses the all-point interpolated
//! area under the precision-recall curve (the precision envelope), and mAP
//! averages over classes that appear in the ground truth; classes with no
//! ground-truth instances are excluded from the mean, as noted in every
//! report header.

use crate::error::{Error, Result};
use crate::geometry::{iou, LabeledBox, ScoredBox};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Stamped into every report so result files identify the AP convention
/// that produced them.
pub const EVALUATOR_VERSION: &str = "ap-allpoint-v1";

const EXCLUSION_NOTE: &str = "classes absent from the ground truth are excluded from the mean";

/// Detections and ground truth of one evaluated frame.
#[derive(Debug, Clone, Default)]
pub struct EvalFrame {
    pub detections: Vec<ScoredBox>,
    pub ground_truth: Vec<LabeledBox>,
}

/// The IoU thresholds 0.5, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Greedy one-to-one matching; returns a TP flag per detection, aligned
/// with the input order.
pub fn match_detections(dets: &[ScoredBox], gts: &[LabeledBox], iou_thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut gt_taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] || gt.label != det.label {
                continue;
            }
            let ov = iou(&det.rect, &gt.rect).unwrap_or(0.0);
            if ov >= iou_thresh && best.map_or(true, |(b, _)| ov > b) {
                best = Some((ov, gi));
            }
        }
        if let Some((_, gi)) = best {
            gt_taken[gi] = true;
            tp[di] = true;
        }
    }
    tp
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub gt_count: usize,
    /// AP per threshold, aligned with `EvalResult::thresholds`.
    pub ap: Vec<f64>,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    #[serde(rename = "fn")]
    pub missed: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub evaluator_version: String,
    pub note: String,
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    /// mAP per threshold, aligned with `thresholds`.
    pub map_per_threshold: Vec<f64>,
    /// Mean of `map_per_threshold` (the 0.5:0.95 figure under
    /// [`coco_thresholds`]).
    pub map_mean: f64,
}

impl EvalResult {
    pub fn map_at(&self, thresh: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - thresh).abs() < 1e-9)
            .map(|i| self.map_per_threshold[i])
    }

    /// Plain-text table; one row per class plus the mAP summary lines.
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        writeln!(s, "# evaluator {} ({})", self.evaluator_version, self.note).unwrap();
        write!(s, "{:<8}{:>8}", "class", "gt").unwrap();
        for t in &self.thresholds {
            write!(s, "{:>10}", format!("AP@{t:.2}")).unwrap();
        }
        writeln!(s).unwrap();
        for c in &self.classes {
            write!(s, "{:<8}{:>8}", c.class, c.gt_count).unwrap();
            for ap in &c.ap {
                write!(s, "{:>10.4}", ap).unwrap();
            }
            writeln!(s).unwrap();
        }
        write!(s, "{:<8}{:>8}", "mAP", "").unwrap();
        for m in &self.map_per_threshold {
            write!(s, "{:>10.4}", m).unwrap();
        }
        writeln!(s).unwrap();
        writeln!(s, "mAP mean over thresholds: {:.4}", self.map_mean).unwrap();
        s
    }
}

/// Evaluate per-frame matches over a test set at the given thresholds.
pub fn compute_map(frames: &[EvalFrame], thresholds: &[f64]) -> Result<EvalResult> {
    let classes: BTreeSet<usize> = frames
        .iter()
        .flat_map(|f| f.ground_truth.iter().map(|g| g.label))
        .collect();
    if classes.is_empty() {
        return Err(Error::NoGroundTruthInstances);
    }

    let mut reports: Vec<ClassReport> = classes
        .iter()
        .map(|&class| ClassReport {
            class,
            gt_count: frames
                .iter()
                .map(|f| f.ground_truth.iter().filter(|g| g.label == class).count())
                .sum(),
            ap: Vec::new(),
            tp: Vec::new(),
            fp: Vec::new(),
            missed: Vec::new(),
        })
        .collect();
    let mut map_per_threshold = Vec::with_capacity(thresholds.len());

    for &thresh in thresholds {
        // per-frame matching, then per-class global PR curves
        let mut flags: Vec<Vec<bool>> = Vec::with_capacity(frames.len());
        for f in frames {
            flags.push(match_detections(&f.detections, &f.ground_truth, thresh));
        }
        let mut aps = Vec::with_capacity(reports.len());
        for report in reports.iter_mut() {
            let class = report.class;
            // (score, frame, det index, tp) for every detection of the class
            let mut rows: Vec<(f64, usize, usize, bool)> = Vec::new();
            for (fi, f) in frames.iter().enumerate() {
                for (di, d) in f.detections.iter().enumerate() {
                    if d.label == class {
                        rows.push((d.score, fi, di, flags[fi][di]));
                    }
                }
            }
            rows.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let tp_total = rows.iter().filter(|r| r.3).count();
            let ap = average_precision(
                &rows.iter().map(|r| r.3).collect::<Vec<bool>>(),
                report.gt_count,
            );
            report.ap.push(ap);
            report.tp.push(tp_total);
            report.fp.push(rows.len() - tp_total);
            report.missed.push(report.gt_count - tp_total);
            aps.push(ap);
        }
        map_per_threshold.push(aps.iter().sum::<f64>() / aps.len() as f64);
    }

    let map_mean = map_per_threshold.iter().sum::<f64>() / map_per_threshold.len().max(1) as f64;
    Ok(EvalResult {
        evaluator_version: EVALUATOR_VERSION.to_string(),
        note: EXCLUSION_NOTE.to_string(),
        thresholds: thresholds.to_vec(),
        classes: reports,
        map_per_threshold,
        map_mean,
    })
}

/// Area under the all-point interpolated PR curve for score-ordered TP
/// flags against `gt_count` ground-truth instances.
fn average_precision(tp_sorted: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 || tp_sorted.is_empty() {
        return 0.0;
    }
    let n = tp_sorted.len();
    let mut recall = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let mut tp_cum = 0usize;
    for (k, &is_tp) in tp_sorted.iter().enumerate() {
        if is_tp {
            tp_cum += 1;
        }
        recall.push(tp_cum as f64 / gt_count as f64);
        precision.push(tp_cum as f64 / (k + 1) as f64);
    }
    // precision envelope from the right
    for k in (0..n - 1).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for k in 0..n {
        ap += (recall[k] - prev_r) * precision[k];
        prev_r = recall[k];
    }
    ap
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box;
    use rand::Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> Box {
        Box::new(x1, y1, x2, y2).unwrap()
    }

    fn det(rect: Box, score: f64, label: usize) -> ScoredBox {
        ScoredBox { rect, score, label }
    }

    fn gt(rect: Box, label: usize) -> LabeledBox {
        LabeledBox { rect, label }
    }

    /// Independent matcher: recomputes IoU from raw coordinate arithmetic
    /// and walks the same greedy order.
    fn match_oracle(dets: &[ScoredBox], gts: &[LabeledBox], thresh: f64) -> Vec<bool> {
        let raw_iou = |a: &Box, b: &Box| -> f64 {
            let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
            let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
            let inter = iw * ih;
            inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter)
        };
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
        let mut taken = vec![false; gts.len()];
        let mut tp = vec![false; dets.len()];
        for &di in &order {
            let mut best = -1.0;
            let mut best_gi = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.label != dets[di].label {
                    continue;
                }
                let ov = raw_iou(&dets[di].rect, &g.rect);
                if ov >= thresh && ov > best {
                    best = ov;
                    best_gi = Some(gi);
                }
            }
            if let Some(gi) = best_gi {
                taken[gi] = true;
                tp[di] = true;
            }
        }
        tp
    }

    /// Alternative AP: numerically integrate the precision envelope on a
    /// dense recall grid.
    fn ap_oracle(tp_sorted: &[bool], gt_count: usize) -> f64 {
        if gt_count == 0 || tp_sorted.is_empty() {
            return 0.0;
        }
        let mut points = Vec::new();
        let mut tp_cum = 0;
        for (k, &t) in tp_sorted.iter().enumerate() {
            if t {
                tp_cum += 1;
            }
            points.push((tp_cum as f64 / gt_count as f64, tp_cum as f64 / (k + 1) as f64));
        }
        let envelope = |r: f64| -> f64 {
            points
                .iter()
                .filter(|&&(pr, _)| pr >= r)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        };
        let n = 200_000;
        (1..=n).map(|i| envelope(i as f64 / n as f64)).sum::<f64>() / n as f64
    }

    #[test]
    fn perfect_detections_all_tp() {
        let gts = vec![gt(bx(0.0, 0.0, 10.0, 10.0), 1), gt(bx(20.0, 0.0, 30.0, 10.0), 2)];
        let dets: Vec<ScoredBox> = gts.iter().map(|g| det(g.rect, 1.0, g.label)).collect();
        let flags = match_detections(&dets, &gts, 0.5);
        assert_eq!(flags, vec![true, true]);
        let frames = [EvalFrame {
            detections: dets,
            ground_truth: gts,
        }];
        let res = compute_map(&frames, &[0.5]).unwrap();
        assert_eq!(res.map_per_threshold[0], 1.0);
        for c in &res.classes {
            assert_eq!(c.fp[0], 0);
            assert_eq!(c.missed[0], 0);
        }
    }

    #[test]
    fn one_to_one_matching_second_det_is_fp() {
        let gts = vec![gt(bx(0.0, 0.0, 10.0, 10.0), 1)];
        let dets = vec![
            det(bx(0.0, 0.0, 10.0, 10.0), 0.9, 1),
            det(bx(0.5, 0.5, 10.0, 10.0), 0.8, 1),
        ];
        assert_eq!(match_detections(&dets, &gts, 0.5), vec![true, false]);
    }

    #[test]
    fn matching_equals_oracle_on_random_scenes() {
        let mut rng = crate::rng::stream_rng(31, 500);
        for _ in 0..100 {
            let gts: Vec<LabeledBox> = (0..25)
                .map(|_| {
                    let x1 = rng.gen_range(0.0..50.0);
                    let y1 = rng.gen_range(0.0..50.0);
                    gt(
                        bx(x1, y1, x1 + rng.gen_range(3.0..15.0), y1 + rng.gen_range(3.0..15.0)),
                        rng.gen_range(1..4),
                    )
                })
                .collect();
            let dets: Vec<ScoredBox> = (0..25)
                .map(|_| {
                    let g = &gts[rng.gen_range(0..gts.len())];
                    let dx = rng.gen_range(-4.0..4.0);
                    let dy = rng.gen_range(-4.0..4.0);
                    det(
                        bx(
                            g.rect.x1 + dx,
                            g.rect.y1 + dy,
                            g.rect.x2 + dx + rng.gen_range(-1.0..1.0),
                            g.rect.y2 + dy + rng.gen_range(-1.0..1.0),
                        ),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(1..4),
                    )
                })
                .collect();
            assert_eq!(
                match_detections(&dets, &gts, 0.5),
                match_oracle(&dets, &gts, 0.5)
            );
        }
    }

    #[test]
    fn ap_hand_cases() {
        // single TP
        let g = vec![gt(bx(0.0, 0.0, 10.0, 10.0), 1)];
        let mk = |dets: Vec<ScoredBox>| {
            compute_map(
                &[EvalFrame {
                    detections: dets,
                    ground_truth: g.clone(),
                }],
                &[0.5],
            )
            .unwrap()
            .map_per_threshold[0]
        };
        assert_eq!(mk(vec![det(bx(0.0, 0.0, 10.0, 10.0), 1.0, 1)]), 1.0);
        // FP at 0.9 then TP at 0.8: AP = 0.5
        let ap = mk(vec![
            det(bx(30.0, 30.0, 40.0, 40.0), 0.9, 1),
            det(bx(0.0, 0.0, 10.0, 10.0), 0.8, 1),
        ]);
        assert!((ap - 0.5).abs() < 1e-12);
        // TP at 0.9 then FP at 0.8: AP = 1.0
        let ap = mk(vec![
            det(bx(0.0, 0.0, 10.0, 10.0), 0.9, 1),
            det(bx(30.0, 30.0, 40.0, 40.0), 0.8, 1),
        ]);
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_matches_dense_integration_and_improves_without_fp() {
        let mut rng = crate::rng::stream_rng(37, 501);
        for _ in 0..30 {
            let n = rng.gen_range(3..20);
            let gt_count = rng.gen_range(1..10usize);
            let flags: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let tp_total = flags.iter().filter(|&&f| f).count().min(gt_count);
            // keep at most gt_count TPs so recall stays <= 1
            let mut seen = 0;
            let flags: Vec<bool> = flags
                .into_iter()
                .map(|f| {
                    if f && seen < tp_total {
                        seen += 1;
                        true
                    } else {
                        false
                    }
                })
                .collect();
            let ap = average_precision(&flags, gt_count);
            let dense = ap_oracle(&flags, gt_count);
            assert!((ap - dense).abs() < 2e-3, "{ap} vs dense {dense}");

            // removing any FP must not decrease AP
            for k in 0..flags.len() {
                if !flags[k] {
                    let mut reduced = flags.clone();
                    reduced.remove(k);
                    assert!(average_precision(&reduced, gt_count) >= ap - 1e-12);
                }
            }
        }
    }

    #[test]
    fn evaluator_independent_of_frame_order() {
        let mut rng = crate::rng::stream_rng(41, 502);
        let mut frames: Vec<EvalFrame> = (0..6)
            .map(|_| {
                let gts: Vec<LabeledBox> = (0..4)
                    .map(|_| {
                        let x1 = rng.gen_range(0.0..40.0);
                        let y1 = rng.gen_range(0.0..40.0);
                        gt(bx(x1, y1, x1 + 8.0, y1 + 8.0), rng.gen_range(1..3))
                    })
                    .collect();
                let dets: Vec<ScoredBox> = gts
                    .iter()
                    .map(|g| {
                        det(
                            bx(g.rect.x1 + 1.0, g.rect.y1, g.rect.x2, g.rect.y2),
                            rng.gen_range(0.1..1.0),
                            g.label,
                        )
                    })
                    .collect();
                EvalFrame {
                    detections: dets,
                    ground_truth: gts,
                }
            })
            .collect();
        let a = compute_map(&frames, &coco_thresholds()).unwrap();
        frames.reverse();
        let b = compute_map(&frames, &coco_thresholds()).unwrap();
        for (x, y) in a.map_per_threshold.iter().zip(b.map_per_threshold.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_detections_map_zero() {
        let frames = [EvalFrame {
            detections: vec![],
            ground_truth: vec![gt(bx(0.0, 0.0, 5.0, 5.0), 1)],
        }];
        let res = compute_map(&frames, &[0.5, 0.75]).unwrap();
        assert_eq!(res.map_per_threshold, vec![0.0, 0.0]);
        assert_eq!(res.map_mean, 0.0);
    }

    #[test]
    fn class_without_gt_excluded() {
        let frames = [EvalFrame {
            detections: vec![det(bx(0.0, 0.0, 5.0, 5.0), 0.9, 2)],
            ground_truth: vec![gt(bx(0.0, 0.0, 5.0, 5.0), 1)],
        }];
        let res = compute_map(&frames, &[0.5]).unwrap();
        // only class 1 contributes; the spurious class-2 detection cannot
        // drag the mean through a zero-GT class
        assert_eq!(res.classes.len(), 1);
        assert_eq!(res.classes[0].class, 1);
        assert_eq!(res.map_per_threshold[0], 0.0);
    }

    #[test]
    fn no_gt_at_all_is_error() {
        let frames = [EvalFrame::default()];
        assert!(compute_map(&frames, &[0.5]).is_err());
    }

    #[test]
    fn json_roundtrip_and_version_stamp() {
        let frames = [EvalFrame {
            detections: vec![det(bx(0.0, 0.0, 5.0, 5.0), 0.9, 1)],
            ground_truth: vec![gt(bx(0.0, 0.0, 5.0, 5.0), 1)],
        }];
        let res = compute_map(&frames, &[0.5]).unwrap();
        assert_eq!(res.evaluator_version, EVALUATOR_VERSION);
        let s = serde_json::to_string(&res).unwrap();
        let back: EvalResult = serde_json::from_str(&s).unwrap();
        assert_eq!(back.map_per_threshold, res.map_per_threshold);
        assert!(res.to_text().contains("AP@0.50"));
    }
}
