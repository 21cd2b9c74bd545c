//! Precision/recall curves and 101-point interpolated average precision.

/// One point of a precision/recall curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    /// Lowest confidence admitted at this operating point.
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Build the PR curve from `(confidence, is_tp)` pairs.
///
/// Input order does not matter. Predictions with equal confidence enter the
/// curve together, so one operating point is emitted per distinct
/// confidence.
pub fn pr_curve(scored: &[(f64, bool)], num_gt: usize) -> Vec<PrPoint> {
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let conf = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == conf {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(PrPoint {
            confidence: conf,
            precision: tp as f64 / (tp + fp) as f64,
            recall: if num_gt == 0 {
                0.0
            } else {
                tp as f64 / num_gt as f64
            },
        });
    }
    out
}

/// Running maximum of precision taken from the right.
pub fn precision_envelope(curve: &[PrPoint]) -> Vec<f64> {
    let mut env: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    env
}

pub const RECALL_SAMPLES: usize = 101;

/// Mean envelope precision at recall 0.00, 0.01, ..., 1.00. At each sample
/// the first operating point reaching that recall is used; samples beyond
/// the maximum recall contribute zero. `None` when there is no ground truth.
pub fn average_precision_101(scored: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let curve = pr_curve(scored, num_gt);
    let env = precision_envelope(&curve);
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..RECALL_SAMPLES {
        let r = i as f64 / (RECALL_SAMPLES - 1) as f64;
        while k < curve.len() && curve[k].recall < r {
            k += 1;
        }
        if k == curve.len() {
            break;
        }
        sum += env[k];
    }
    Some(sum / RECALL_SAMPLES as f64)
}
