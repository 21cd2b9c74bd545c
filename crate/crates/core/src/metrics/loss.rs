//! Standalone loss diagnostics: cross-entropy classification loss and
//! summed squared box-coordinate error.

use super::MetricsError;

/// One diagnostic sample: a one-hot truth vector with predicted class
/// probabilities, and ground-truth with predicted box coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSample {
    pub truth: Vec<f64>,
    pub probs: Vec<f64>,
    pub coords: Vec<f64>,
    pub predicted_coords: Vec<f64>,
}

/// `-sum(y_i * ln p_i)` over a one-hot `y`.
pub fn cross_entropy(truth: &[f64], probs: &[f64]) -> Result<f64, MetricsError> {
    if truth.len() != probs.len() {
        return Err(MetricsError::LengthMismatch {
            left: truth.len(),
            right: probs.len(),
        });
    }
    let ones = truth.iter().filter(|&&y| y == 1.0).count();
    if ones != 1 || truth.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(MetricsError::NotOneHot);
    }
    if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(MetricsError::ProbabilityOutOfRange {
            index: i,
            value: probs[i],
        });
    }
    let mut loss = 0.0;
    for (i, (&y, &p)) in truth.iter().zip(probs).enumerate() {
        if y == 0.0 {
            continue;
        }
        if p == 0.0 {
            return Err(MetricsError::InfiniteLoss { class: i });
        }
        loss -= y * p.ln();
    }
    // -0.0 when p = 1
    Ok(loss.max(0.0))
}

/// `sum((x_i - x̂_i)^2)`.
pub fn squared_error(coords: &[f64], predicted: &[f64]) -> Result<f64, MetricsError> {
    if coords.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            left: coords.len(),
            right: predicted.len(),
        });
    }
    Ok(coords
        .iter()
        .zip(predicted)
        .map(|(x, xh)| (x - xh) * (x - xh))
        .sum())
}

pub fn cls_loss(s: &LossSample) -> Result<f64, MetricsError> {
    cross_entropy(&s.truth, &s.probs)
}

pub fn bbox_loss(s: &LossSample) -> Result<f64, MetricsError> {
    squared_error(&s.coords, &s.predicted_coords)
}
