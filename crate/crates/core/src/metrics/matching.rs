use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::geometry::{iou, BBox};
use crate::postprocess::{rank_order, Detection};

/// A ground-truth box in the same pixel space as the predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPrediction {
    pub class_id: usize,
    pub confidence: f64,
    /// True-positive flag per IoU threshold.
    pub tp: Vec<bool>,
    /// Index into the image's ground truth list, per IoU threshold.
    pub matched_gt: Vec<Option<usize>>,
}

/// Matching outcome for a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub iou_thresholds: Vec<f64>,
    /// Predictions in rank order (confidence descending).
    pub predictions: Vec<MatchedPrediction>,
    pub gt_per_class: Vec<usize>,
}

/// Greedy matching of one image's predictions to its ground truth.
///
/// Predictions are visited by confidence (see [`rank_order`]). At each IoU
/// threshold, a prediction takes the unmatched ground truth of its class with
/// the highest IoU (lowest index on ties) and is a true positive iff that
/// IoU is at least the threshold.
pub fn match_detections(
    preds: &[Detection],
    gts: &[GtBox],
    iou_thresholds: &[f64],
    num_classes: usize,
) -> Result<MatchResult, MetricsError> {
    for p in preds {
        if p.class_id >= num_classes {
            return Err(MetricsError::ClassOutOfRange {
                class_id: p.class_id,
                num_classes,
            });
        }
    }
    let mut gt_per_class = vec![0usize; num_classes];
    for g in gts {
        if g.class_id >= num_classes {
            return Err(MetricsError::ClassOutOfRange {
                class_id: g.class_id,
                num_classes,
            });
        }
        gt_per_class[g.class_id] += 1;
    }

    let mut order: Vec<&Detection> = preds.iter().collect();
    order.sort_by(|a, b| rank_order(a, b));

    let mut taken = vec![vec![false; gts.len()]; iou_thresholds.len()];
    let mut predictions = Vec::with_capacity(order.len());
    for p in order {
        let ious: Vec<(usize, f64)> = gts
            .iter()
            .enumerate()
            .filter(|(_, g)| g.class_id == p.class_id)
            .map(|(j, g)| (j, iou(&p.bbox, &g.bbox)))
            .collect();
        let mut tp = Vec::with_capacity(iou_thresholds.len());
        let mut matched_gt = Vec::with_capacity(iou_thresholds.len());
        for (t, &thr) in iou_thresholds.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for &(j, v) in &ious {
                if taken[t][j] {
                    continue;
                }
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= thr => {
                    taken[t][j] = true;
                    tp.push(true);
                    matched_gt.push(Some(j));
                }
                _ => {
                    tp.push(false);
                    matched_gt.push(None);
                }
            }
        }
        predictions.push(MatchedPrediction {
            class_id: p.class_id,
            confidence: p.confidence,
            tp,
            matched_gt,
        });
    }
    Ok(MatchResult {
        iou_thresholds: iou_thresholds.to_vec(),
        predictions,
        gt_per_class,
    })
}
