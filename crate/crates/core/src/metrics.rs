//! Task metrics: Top-1 accuracy, detection mAP/mAR at a fixed IoU threshold,
//! and segmentation GCR/mIoU.
//!
//! Detection AP uses continuous all-points interpolation (area under the
//! precision envelope). Classes with no ground-truth instances are excluded
//! from class means. All metrics are fractions in [0,1].

use crate::error::{CtaError, Result};
use ndarray::Array2;

/// A predicted detection in pixel coordinates (max edges exclusive).
#[derive(Debug, Clone, PartialEq)]
pub struct DetPred {
    pub class_id: usize,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub confidence: f64,
}

/// A ground-truth box in pixel coordinates (max edges exclusive).
#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<&crate::datagen::BoxLabel> for GtBox {
    fn from(b: &crate::datagen::BoxLabel) -> Self {
        GtBox {
            class_id: b.class_id,
            x_min: f64::from(b.x_min),
            y_min: f64::from(b.y_min),
            x_max: f64::from(b.x_max),
            y_max: f64::from(b.y_max),
        }
    }
}

/// Intersection-over-union of two boxes in continuous coordinates.
pub fn box_iou(
    a: (f64, f64, f64, f64),
    b: (f64, f64, f64, f64),
) -> f64 {
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.2 - a.0) * (a.3 - a.1);
    let area_b = (b.2 - b.0) * (b.3 - b.1);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Fraction of exact prediction/label matches.
pub fn top1_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(CtaError::InvalidInput(format!(
            "top1_accuracy needs equal nonempty lengths, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn validate_box(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<()> {
    if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite())
        || x_min >= x_max
        || y_min >= y_max
    {
        return Err(CtaError::InvalidInput(format!(
            "invalid box ({x_min}, {y_min}, {x_max}, {y_max})"
        )));
    }
    Ok(())
}

/// Mean average precision and mean average recall at one IoU threshold.
///
/// Per class: predictions across all images are ranked by confidence and
/// greedily matched to the not-yet-matched same-image ground truth with the
/// highest IoU; a match below the threshold is a false positive. AP is the
/// area under the precision envelope; AR is the recall at the end of the
/// ranked list. Means are taken over classes with at least one ground truth.
pub fn detection_map_mar(
    preds: &[Vec<DetPred>],
    gts: &[Vec<GtBox>],
    iou_thresh: f64,
) -> Result<(f64, f64)> {
    if preds.len() != gts.len() {
        return Err(CtaError::InvalidInput(format!(
            "detection eval: {} prediction lists vs {} ground-truth lists",
            preds.len(),
            gts.len()
        )));
    }
    let mut max_class = 0usize;
    for img in preds {
        for p in img {
            validate_box(p.x_min, p.y_min, p.x_max, p.y_max)?;
            if !p.confidence.is_finite() {
                return Err(CtaError::InvalidInput("non-finite confidence".into()));
            }
            max_class = max_class.max(p.class_id);
        }
    }
    for img in gts {
        for b in img {
            validate_box(b.x_min, b.y_min, b.x_max, b.y_max)?;
            max_class = max_class.max(b.class_id);
        }
    }

    let mut ap_sum = 0.0;
    let mut ar_sum = 0.0;
    let mut n_classes = 0usize;
    for class_id in 0..=max_class {
        let n_gt: usize = gts
            .iter()
            .map(|img| img.iter().filter(|b| b.class_id == class_id).count())
            .sum();
        if n_gt == 0 {
            continue;
        }
        let (ap, ar) = class_ap_ar(preds, gts, class_id, n_gt, iou_thresh);
        ap_sum += ap;
        ar_sum += ar;
        n_classes += 1;
    }
    if n_classes == 0 {
        return Err(CtaError::InvalidInput(
            "detection eval: no ground-truth boxes".into(),
        ));
    }
    Ok((ap_sum / n_classes as f64, ar_sum / n_classes as f64))
}

fn class_ap_ar(
    preds: &[Vec<DetPred>],
    gts: &[Vec<GtBox>],
    class_id: usize,
    n_gt: usize,
    iou_thresh: f64,
) -> (f64, f64) {
    // (image index, prediction) ranked by confidence; ties keep scan order
    let mut ranked: Vec<(usize, &DetPred)> = Vec::new();
    for (i, img) in preds.iter().enumerate() {
        for p in img {
            if p.class_id == class_id {
                ranked.push((i, p));
            }
        }
    }
    ranked.sort_by(|a, b| {
        b.1.confidence
            .partial_cmp(&a.1.confidence)
            .expect("finite confidences")
    });

    let mut matched: Vec<Vec<bool>> = gts
        .iter()
        .map(|img| vec![false; img.len()])
        .collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for (img_idx, p) in &ranked {
        let pb = (p.x_min, p.y_min, p.x_max, p.y_max);
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts[*img_idx].iter().enumerate() {
            if gt.class_id != class_id || matched[*img_idx][gi] {
                continue;
            }
            let iou = box_iou(pb, (gt.x_min, gt.y_min, gt.x_max, gt.y_max));
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= iou_thresh => {
                matched[*img_idx][gi] = true;
                tp_flags.push(true);
            }
            _ => tp_flags.push(false),
        }
    }

    // precision/recall after each ranked prediction
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len());
    for (rank, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        curve.push((
            tp as f64 / n_gt as f64,
            tp as f64 / (rank + 1) as f64,
        ));
    }
    let recall = tp as f64 / n_gt as f64;
    (average_precision(&curve), recall)
}

/// Area under the precision envelope for a (recall, precision) curve ordered
/// by rank (recall non-decreasing).
pub fn average_precision(curve: &[(f64, f64)]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    // envelope: precision at recall r is the max precision at recall >= r
    let mut env: Vec<(f64, f64)> = curve.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i].1 = env[i].1.max(env[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &env {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    ap
}

/// Per-class AP at one IoU threshold; `None` for classes without ground truth.
pub fn detection_ap_per_class(
    preds: &[Vec<DetPred>],
    gts: &[Vec<GtBox>],
    num_classes: usize,
    iou_thresh: f64,
) -> Result<Vec<Option<f64>>> {
    // reuse the validation from the aggregate path
    detection_map_mar(preds, gts, iou_thresh)?;
    let mut out = Vec::with_capacity(num_classes);
    for class_id in 0..num_classes {
        let n_gt: usize = gts
            .iter()
            .map(|img| img.iter().filter(|b| b.class_id == class_id).count())
            .sum();
        if n_gt == 0 {
            out.push(None);
        } else {
            let (ap, _) = class_ap_ar(preds, gts, class_id, n_gt, iou_thresh);
            out.push(Some(ap));
        }
    }
    Ok(out)
}

/// Per-id IoU (index 0 = background); `None` for ids absent from both sides.
pub fn segmentation_iou_per_class(
    pred_masks: &[Array2<u8>],
    gt_masks: &[Array2<u8>],
    num_classes: usize,
) -> Result<Vec<Option<f64>>> {
    segmentation_gcr_miou(pred_masks, gt_masks, num_classes)?;
    let n_ids = num_classes + 1;
    let mut inter = vec![0u64; n_ids];
    let mut union = vec![0u64; n_ids];
    let mut present = vec![false; n_ids];
    for (p, g) in pred_masks.iter().zip(gt_masks.iter()) {
        for (&pv, &gv) in p.iter().zip(g.iter()) {
            let (pv, gv) = (pv as usize, gv as usize);
            present[pv] = true;
            present[gv] = true;
            if pv == gv {
                inter[pv] += 1;
                union[pv] += 1;
            } else {
                union[pv] += 1;
                union[gv] += 1;
            }
        }
    }
    Ok((0..n_ids)
        .map(|id| {
            if present[id] {
                Some(inter[id] as f64 / union[id] as f64)
            } else {
                None
            }
        })
        .collect())
}

/// Global correct rate and mean IoU over all images.
///
/// `num_classes` counts foreground classes; mask ids run 0..=num_classes with
/// 0 as background. Ids absent from both prediction and ground truth are
/// excluded from the mIoU mean; background participates like any other id.
pub fn segmentation_gcr_miou(
    pred_masks: &[Array2<u8>],
    gt_masks: &[Array2<u8>],
    num_classes: usize,
) -> Result<(f64, f64)> {
    if pred_masks.is_empty() || pred_masks.len() != gt_masks.len() {
        return Err(CtaError::InvalidInput(
            "segmentation eval needs equal nonempty mask lists".into(),
        ));
    }
    let n_ids = num_classes + 1;
    let mut inter = vec![0u64; n_ids];
    let mut union = vec![0u64; n_ids];
    let mut present = vec![false; n_ids];
    let mut correct = 0u64;
    let mut total = 0u64;

    for (p, g) in pred_masks.iter().zip(gt_masks.iter()) {
        if p.dim() != g.dim() {
            return Err(CtaError::InvalidInput(format!(
                "mask shape mismatch: {:?} vs {:?}",
                p.dim(),
                g.dim()
            )));
        }
        for (&pv, &gv) in p.iter().zip(g.iter()) {
            let (pv, gv) = (pv as usize, gv as usize);
            if pv >= n_ids || gv >= n_ids {
                return Err(CtaError::InvalidInput(format!(
                    "mask value out of range: pred {pv} gt {gv} (classes 0..={num_classes})"
                )));
            }
            present[pv] = true;
            present[gv] = true;
            total += 1;
            if pv == gv {
                correct += 1;
                inter[pv] += 1;
                union[pv] += 1;
            } else {
                union[pv] += 1;
                union[gv] += 1;
            }
        }
    }

    let gcr = correct as f64 / total as f64;
    let mut iou_sum = 0.0;
    let mut n_included = 0usize;
    for id in 0..n_ids {
        if present[id] {
            iou_sum += inter[id] as f64 / union[id] as f64;
            n_included += 1;
        }
    }
    Ok((gcr, iou_sum / n_included as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn pred(class_id: usize, b: (f64, f64, f64, f64), conf: f64) -> DetPred {
        DetPred {
            class_id,
            x_min: b.0,
            y_min: b.1,
            x_max: b.2,
            y_max: b.3,
            confidence: conf,
        }
    }

    fn gt(class_id: usize, b: (f64, f64, f64, f64)) -> GtBox {
        GtBox {
            class_id,
            x_min: b.0,
            y_min: b.1,
            x_max: b.2,
            y_max: b.3,
        }
    }

    #[test]
    fn top1_cases() {
        assert_eq!(top1_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&[1, 2, 3, 0], &[1, 2, 9, 9]).unwrap(), 0.5);
        assert_eq!(top1_accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert!(top1_accuracy(&[], &[]).is_err());
        assert!(top1_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn single_perfect_match_gives_ap_one() {
        // IoU between the boxes is 0.6 >= 0.5
        let preds = vec![vec![pred(0, (0.0, 0.0, 10.0, 6.0), 0.9)]];
        let gts = vec![vec![gt(0, (0.0, 0.0, 10.0, 10.0))]];
        let (map, mar) = detection_map_mar(&preds, &gts, 0.5).unwrap();
        assert_eq!(map, 1.0);
        assert_eq!(mar, 1.0);
    }

    #[test]
    fn low_iou_match_gives_zero() {
        let preds = vec![vec![pred(0, (0.0, 0.0, 10.0, 3.0), 0.9)]];
        let gts = vec![vec![gt(0, (0.0, 0.0, 10.0, 10.0))]];
        let (map, mar) = detection_map_mar(&preds, &gts, 0.5).unwrap();
        assert_eq!(map, 0.0);
        assert_eq!(mar, 0.0);
    }

    #[test]
    fn duplicate_detections_count_once() {
        // second hit on an already-matched gt is a false positive
        let preds = vec![vec![
            pred(0, (0.0, 0.0, 10.0, 10.0), 0.9),
            pred(0, (0.0, 0.0, 10.0, 10.0), 0.8),
        ]];
        let gts = vec![vec![gt(0, (0.0, 0.0, 10.0, 10.0))]];
        let (map, mar) = detection_map_mar(&preds, &gts, 0.5).unwrap();
        assert_eq!(map, 1.0); // envelope: precision 1.0 up to recall 1.0
        assert_eq!(mar, 1.0);
    }

    #[test]
    fn classes_without_gt_are_excluded() {
        let preds = vec![vec![
            pred(0, (0.0, 0.0, 10.0, 10.0), 0.9),
            pred(1, (20.0, 20.0, 30.0, 30.0), 0.9), // no gt of class 1
        ]];
        let gts = vec![vec![gt(0, (0.0, 0.0, 10.0, 10.0))]];
        let (map, mar) = detection_map_mar(&preds, &gts, 0.5).unwrap();
        assert_eq!(map, 1.0);
        assert_eq!(mar, 1.0);
    }

    #[test]
    fn removing_a_false_positive_never_decreases_ap() {
        let with_fp = vec![vec![
            pred(0, (0.0, 0.0, 10.0, 10.0), 0.9),
            pred(0, (50.0, 50.0, 60.0, 60.0), 0.95), // confident false positive
        ]];
        let without_fp = vec![vec![pred(0, (0.0, 0.0, 10.0, 10.0), 0.9)]];
        let gts = vec![vec![gt(0, (0.0, 0.0, 10.0, 10.0))]];
        let (ap_with, _) = detection_map_mar(&with_fp, &gts, 0.5).unwrap();
        let (ap_without, _) = detection_map_mar(&without_fp, &gts, 0.5).unwrap();
        assert!(ap_without >= ap_with);
    }

    #[test]
    fn invalid_boxes_rejected() {
        let preds = vec![vec![pred(0, (10.0, 0.0, 5.0, 10.0), 0.9)]];
        let gts = vec![vec![gt(0, (0.0, 0.0, 10.0, 10.0))]];
        assert!(detection_map_mar(&preds, &gts, 0.5).is_err());
    }

    #[test]
    fn segmentation_hand_example() {
        // gt=[[0,0],[1,1]], pred=[[0,1],[1,1]]: GCR 0.75, IoU0 1/2, IoU1 2/3
        let gt = arr2(&[[0u8, 0], [1, 1]]);
        let pred = arr2(&[[0u8, 1], [1, 1]]);
        let (gcr, miou) = segmentation_gcr_miou(&[pred], &[gt], 1).unwrap();
        assert!((gcr - 0.75).abs() < 1e-12);
        assert!((miou - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn segmentation_perfect_prediction() {
        let gt = arr2(&[[0u8, 2], [1, 1]]);
        let (gcr, miou) = segmentation_gcr_miou(&[gt.clone()], &[gt], 2).unwrap();
        assert_eq!(gcr, 1.0);
        assert_eq!(miou, 1.0);
    }

    #[test]
    fn segmentation_rejects_bad_values() {
        let gt = arr2(&[[0u8, 5]]);
        let pred = arr2(&[[0u8, 1]]);
        assert!(segmentation_gcr_miou(&[pred], &[gt], 2).is_err());
    }

    #[test]
    fn metrics_are_bounded() {
        let preds = vec![vec![
            pred(0, (0.0, 0.0, 4.0, 4.0), 0.3),
            pred(1, (1.0, 1.0, 7.0, 7.0), 0.8),
        ]];
        let gts = vec![vec![gt(0, (0.0, 0.0, 4.0, 4.0)), gt(1, (2.0, 2.0, 6.0, 6.0))]];
        let (map, mar) = detection_map_mar(&preds, &gts, 0.5).unwrap();
        assert!((0.0..=1.0).contains(&map));
        assert!((0.0..=1.0).contains(&mar));
    }
}
