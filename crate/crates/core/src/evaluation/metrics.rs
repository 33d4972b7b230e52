//! IoU, NMS, average precision and mAP.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detector::DetectionBox;

/// IoU thresholds `0.50, 0.55, .., 0.95`, built from integers so `0.60` is exact.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Intersection over union of two `[x1, y1, x2, y2]` boxes; 0 when the union is empty.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let x = |d: &DetectionBox| d.xyxy().map(f64::from);
    iou_xyxy(x(a), x(b))
}

/// Indices sorted by confidence, descending; equal confidences keep list order.
fn by_confidence(boxes: &[DetectionBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].confidence.partial_cmp(&boxes[i].confidence).unwrap_or(Ordering::Equal));
    order
}

/// Greedy per-class suppression: a box is dropped if a kept box of its class overlaps
/// it with IoU >= `iou_threshold`. Output is sorted by confidence, descending.
pub fn nms(boxes: &[DetectionBox], iou_threshold: f64) -> Vec<DetectionBox> {
    let mut kept: Vec<DetectionBox> = Vec::new();
    for i in by_confidence(boxes) {
        let b = &boxes[i];
        if kept.iter().all(|k| k.class != b.class || iou(k, b) < iou_threshold) {
            kept.push(*b);
        }
    }
    kept
}

/// Per-prediction true/false-positive flags, in confidence order, plus the GT count.
/// Each prediction claims the best-overlapping unclaimed GT of its image.
fn match_predictions(preds: &[Vec<DetectionBox>], gts: &[Vec<DetectionBox>], iou_threshold: f64) -> (Vec<bool>, usize) {
    let mut flat: Vec<(usize, DetectionBox)> = Vec::new();
    for (img, ps) in preds.iter().enumerate() {
        flat.extend(ps.iter().map(|p| (img, *p)));
    }
    let boxes: Vec<DetectionBox> = flat.iter().map(|(_, b)| *b).collect();
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let flags = by_confidence(&boxes)
        .into_iter()
        .map(|i| {
            let (img, p) = flat[i];
            let Some(image_gts) = gts.get(img) else { return false };
            let best = image_gts
                .iter()
                .enumerate()
                .filter(|(j, _)| !claimed[img][*j])
                .map(|(j, g)| (j, iou(&p, g)))
                .fold(None, |best: Option<(usize, f64)>, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                });
            match best {
                Some((j, v)) if v >= iou_threshold => {
                    claimed[img][j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    (flags, gts.iter().map(Vec::len).sum())
}

/// Area under the all-point interpolated precision/recall curve from TP flags in
/// confidence order.
pub fn ap_from_flags(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let points: Vec<(f64, f64)> = flags
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += hit as usize;
            (tp as f64 / (k + 1) as f64, tp as f64 / num_gt as f64)
        })
        .collect();
    interpolated_area(&points)
}

/// `sum_k (r_k - r_{k-1}) * max_{j >= k} p_j` over `(precision, recall)` points.
pub fn interpolated_area(points: &[(f64, f64)]) -> f64 {
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for (k, &(p, _)) in points.iter().enumerate().rev() {
        running = running.max(p);
        envelope[k] = running;
    }
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (k, &(_, r)) in points.iter().enumerate() {
        area += (r - prev_recall) * envelope[k];
        prev_recall = r;
    }
    area
}

/// Single-class AP over a set of images (`preds[i]` and `gts[i]` belong to image `i`).
pub fn average_precision(preds: &[Vec<DetectionBox>], gts: &[Vec<DetectionBox>], iou_threshold: f64) -> f64 {
    let (flags, num_gt) = match_predictions(preds, gts, iou_threshold);
    ap_from_flags(&flags, num_gt)
}

fn of_class(sets: &[Vec<DetectionBox>], class: usize) -> Vec<Vec<DetectionBox>> {
    sets.iter().map(|s| s.iter().filter(|b| b.class == class).copied().collect()).collect()
}

/// AP of one class at every threshold of a ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub gt_count: usize,
    pub ap: Vec<f64>,
}

impl ClassAp {
    pub fn mean(&self) -> f64 {
        self.ap.iter().sum::<f64>() / self.ap.len() as f64
    }
}

/// Per-class AP at each threshold; classes without GT are skipped.
pub fn per_class_ap(preds: &[Vec<DetectionBox>], gts: &[Vec<DetectionBox>], thresholds: &[f64]) -> Vec<ClassAp> {
    let max_class = gts.iter().flatten().map(|b| b.class).max();
    let Some(max_class) = max_class else { return Vec::new() };
    (0..=max_class)
        .filter_map(|c| {
            let g = of_class(gts, c);
            let gt_count: usize = g.iter().map(Vec::len).sum();
            if gt_count == 0 {
                return None;
            }
            let p = of_class(preds, c);
            let ap = thresholds.iter().map(|&t| average_precision(&p, &g, t)).collect();
            Some(ClassAp { class: c, gt_count, ap })
        })
        .collect()
}

/// Mean over GT-bearing classes of the mean AP over `thresholds`; `None` without GT.
pub fn map_at(preds: &[Vec<DetectionBox>], gts: &[Vec<DetectionBox>], thresholds: &[f64]) -> Option<f64> {
    let table = per_class_ap(preds, gts, thresholds);
    if table.is_empty() || thresholds.is_empty() {
        return None;
    }
    Some(table.iter().map(ClassAp::mean).sum::<f64>() / table.len() as f64)
}

/// mAP@0.5 and mAP@0.5:0.95 with the per-class table behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub map50: f64,
    pub map5095: f64,
    pub per_class: Vec<ClassAp>,
}

pub fn map_summary(preds: &[Vec<DetectionBox>], gts: &[Vec<DetectionBox>]) -> Option<MapSummary> {
    let ladder = coco_thresholds();
    let per_class = per_class_ap(preds, gts, &ladder);
    if per_class.is_empty() {
        return None;
    }
    let n = per_class.len() as f64;
    let map50 = per_class.iter().map(|c| c.ap[0]).sum::<f64>() / n;
    let map5095 = per_class.iter().map(ClassAp::mean).sum::<f64>() / n;
    Some(MapSummary { map50, map5095, per_class })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn bx(class: usize, x1: f32, y1: f32, x2: f32, y2: f32, conf: f32) -> DetectionBox {
        DetectionBox::new(class, (x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, conf)
    }

    #[test]
    fn iou_cases() {
        let a = bx(0, 0.1, 0.1, 0.4, 0.5, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(0, 0.6, 0.6, 0.9, 0.9, 1.0)), 0.0);
        assert!((iou_xyxy([0.0, 0.0, 2.0, 2.0], [1.0, 0.0, 3.0, 2.0]) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou_xyxy([0.0; 4], [0.0; 4]), 0.0);
    }

    #[test]
    fn nms_cases() {
        let a = bx(0, 0.1, 0.1, 0.3, 0.3, 0.9);
        assert_eq!(nms(&[a], 0.5), vec![a]);
        let b = DetectionBox { confidence: 0.8, ..a };
        assert_eq!(nms(&[b, a], 0.5), vec![a]);
        // pairwise IoUs: (a, c) = 0.6, (a, d) = 1/7, (c, d) = 1/3 -> a and d survive
        let a = bx(0, 0.0, 0.0, 0.5, 0.4, 0.9);
        let c = bx(0, 0.125, 0.0, 0.625, 0.4, 0.8);
        let d = bx(0, 0.375, 0.0, 0.875, 0.4, 0.7);
        assert!((iou(&a, &c) - 0.6).abs() < 1e-6);
        assert!((iou(&a, &d) - 0.125 / 0.875).abs() < 1e-6);
        let kept = nms(&[d, c, a], 0.5);
        assert_eq!(kept, vec![a, d]);
        // different classes never suppress each other
        assert_eq!(nms(&[a, DetectionBox { class: 1, ..c }], 0.5).len(), 2);
    }

    #[test]
    fn nms_ties_keep_list_order() {
        let a = bx(0, 0.0, 0.0, 0.5, 0.5, 0.5);
        let b = bx(0, 0.0, 0.0, 0.5, 0.51, 0.5);
        assert_eq!(nms(&[b, a], 0.5), vec![b]);
    }

    #[test]
    fn ap_hand_cases() {
        let g = bx(0, 0.1, 0.1, 0.3, 0.3, 1.0);
        let near = bx(0, 0.1, 0.1, 0.3, 0.31, 0.9);
        assert_eq!(average_precision(&[vec![near]], &[vec![g]], 0.5), 1.0);
        assert_eq!(average_precision(&[vec![]], &[vec![g]], 0.5), 0.0);
        let g2 = bx(0, 0.6, 0.6, 0.8, 0.8, 1.0);
        let fp = bx(0, 0.4, 0.0, 0.5, 0.1, 0.8);
        let tp2 = DetectionBox { confidence: 0.7, ..g2 };
        let preds = vec![vec![DetectionBox { confidence: 0.9, ..g }, fp, tp2]];
        let ap = average_precision(&preds, &[vec![g, g2]], 0.5);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn map_threshold_ladder() {
        // IoU exactly 0.6 with every GT
        let gts = vec![vec![bx(0, 0.0, 0.0, 0.5, 0.4, 1.0)], vec![bx(1, 0.0, 0.0, 0.5, 0.4, 1.0)]];
        let preds = vec![vec![bx(0, 0.125, 0.0, 0.625, 0.4, 0.9)], vec![bx(1, 0.125, 0.0, 0.625, 0.4, 0.9)]];
        let s = map_summary(&preds, &gts).unwrap();
        assert_eq!(s.map50, 1.0);
        assert!((s.map5095 - 0.3).abs() < 1e-12);
        assert_eq!(map_at(&preds, &gts, &[0.5]), Some(1.0));
        let perfect = map_summary(&gts, &gts).unwrap();
        assert_eq!((perfect.map50, perfect.map5095), (1.0, 1.0));
    }

    #[test]
    fn absent_when_no_ground_truth() {
        let preds = vec![vec![bx(0, 0.0, 0.0, 0.5, 0.5, 0.9)]];
        assert!(map_summary(&preds, &[vec![]]).is_none());
        assert!(map_at(&preds, &[vec![]], &[0.5]).is_none());
    }

    #[test]
    fn classes_without_gt_are_excluded() {
        let g = bx(1, 0.0, 0.0, 0.5, 0.5, 1.0);
        let stray = bx(0, 0.5, 0.5, 0.9, 0.9, 0.99);
        let hit = DetectionBox { confidence: 0.5, ..g };
        let s = map_summary(&[vec![hit, stray]], &[vec![g]]).unwrap();
        assert_eq!(s.per_class.len(), 1);
        assert_eq!(s.map50, 1.0);
        // pooled into one class the stray ranks first and halves the precision
        assert_eq!(average_precision(&[vec![hit, stray]], &[vec![g]], 0.5), 0.5);
        assert_eq!(map_at(&[vec![g]], &[vec![g]], &[0.5]).unwrap(), 1.0);
    }

    fn arb_box(class_max: usize) -> impl Strategy<Value = DetectionBox> {
        (0..class_max, 0.0f32..1.0, 0.0f32..1.0, 0.01f32..0.5, 0.01f32..0.5, 0.0f32..1.0)
            .prop_map(|(c, cx, cy, w, h, conf)| DetectionBox::new(c, cx, cy, w, h, conf))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(1), b in arb_box(1)) {
            let (x, y) = (iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn nms_output_is_sorted_and_separated(boxes in prop::collection::vec(arb_box(2), 0..25), t in 0.1f64..0.9) {
            let kept = nms(&boxes, t);
            prop_assert!(kept.windows(2).all(|w| w[0].confidence >= w[1].confidence));
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.class != b.class || iou(a, b) < t);
                }
            }
        }

        #[test]
        fn ap_depends_only_on_ranking(
            preds in prop::collection::vec(arb_box(1), 0..15),
            gts in prop::collection::vec(arb_box(1), 1..8),
        ) {
            let ap = average_precision(&[preds.clone()], &[gts.clone()], 0.3);
            let squashed: Vec<_> = preds
                .iter()
                .map(|p| DetectionBox { confidence: p.confidence * 0.5, ..*p })
                .collect();
            prop_assert_eq!(ap, average_precision(&[squashed], &[gts], 0.3));
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }
}
