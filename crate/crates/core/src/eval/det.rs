//! COCO-style detection average precision.
//!
//! Per class, predictions from all images are ranked by score and greedily
//! matched to the still-unmatched ground truth box of highest IoU in the
//! same image. Precision is made monotone from the right and sampled at 101
//! recall points. Classes without ground truth are left out of the mean.

use serde::{Deserialize, Serialize};

use crate::data::BoxAnn;
use crate::heads::det::ScoredBox;

pub const RECALL_POINTS: usize = 101;

pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetMetrics {
    /// Mean AP over IoU 0.50:0.05:0.95; `None` without any ground truth.
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

/// True/false-positive flags of the score-ranked predictions of one class,
/// plus the number of ground-truth boxes of that class.
pub fn ranked_matches(preds: &[Vec<ScoredBox>], gts: &[Vec<BoxAnn>], class: usize, iou_threshold: f64) -> (Vec<bool>, usize) {
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (img, ps) in preds.iter().enumerate() {
        for (i, p) in ps.iter().enumerate() {
            if p.class == class {
                ranked.push((img, i));
            }
        }
    }
    // Stable sort keeps image/proposal order among equal scores.
    ranked.sort_by(|a, b| preds[b.0][b.1].score.total_cmp(&preds[a.0][a.1].score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let n_gt = gts.iter().flatten().filter(|g| g.class == class).count();
    let flags = ranked
        .into_iter()
        .map(|(img, i)| {
            let p = &preds[img][i];
            let Some(image_gts) = gts.get(img) else { return false };
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in image_gts.iter().enumerate() {
                if g.class != class || used[img][j] {
                    continue;
                }
                let iou = p.iou(g);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (flags, n_gt)
}

/// 101-point interpolated AP of a ranked TP/FP sequence.
pub fn interpolated_ap(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        if let Some(i) = recall.iter().position(|&x| x >= level) {
            sum += precision[i];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Per-class AP at one IoU threshold; `None` for classes without ground truth.
pub fn average_precision(preds: &[Vec<ScoredBox>], gts: &[Vec<BoxAnn>], num_classes: usize, iou_threshold: f64) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|c| {
            let (flags, n_gt) = ranked_matches(preds, gts, c, iou_threshold);
            (n_gt > 0).then(|| interpolated_ap(&flags, n_gt))
        })
        .collect()
}

pub fn mean_ap(per_class: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn detection_metrics(preds: &[Vec<ScoredBox>], gts: &[Vec<BoxAnn>], num_classes: usize) -> DetMetrics {
    let per_threshold: Vec<Option<f64>> =
        iou_thresholds().into_iter().map(|thr| mean_ap(&average_precision(preds, gts, num_classes, thr))).collect();
    let map = if per_threshold.iter().all(Option::is_some) {
        Some(per_threshold.iter().flatten().sum::<f64>() / per_threshold.len() as f64)
    } else {
        None
    };
    DetMetrics { map, ap50: per_threshold[0], ap75: per_threshold[5] }
}
