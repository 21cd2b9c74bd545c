use std::collections::BTreeMap;

use serde::Serialize;

use crate::json::opt_f6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SequenceMismatch {
    pub id: String,
    /// `None` when no reading was produced for this plate.
    pub predicted: Option<String>,
    pub truth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceReport {
    pub total: usize,
    pub correct: usize,
    /// `None` when there is no ground truth.
    #[serde(serialize_with = "opt_f6")]
    pub accuracy: Option<f64>,
    pub mismatches: Vec<SequenceMismatch>,
    /// Predicted ids without a ground-truth counterpart; not part of the
    /// accuracy denominator.
    pub unmatched_predictions: Vec<String>,
}

/// Exact, case-sensitive string match rate over ground-truth plate ids.
///
/// A ground-truth id with no prediction counts as a failure.
pub fn sequence_accuracy(
    predicted: &BTreeMap<String, String>,
    truth: &BTreeMap<String, String>,
) -> SequenceReport {
    let mut correct = 0;
    let mut mismatches = Vec::new();
    for (id, want) in truth {
        match predicted.get(id) {
            Some(got) if got == want => correct += 1,
            got => mismatches.push(SequenceMismatch {
                id: id.clone(),
                predicted: got.cloned(),
                truth: want.clone(),
            }),
        }
    }
    let unmatched_predictions = predicted
        .keys()
        .filter(|k| !truth.contains_key(*k))
        .cloned()
        .collect();
    SequenceReport {
        total: truth.len(),
        correct,
        accuracy: (!truth.is_empty()).then(|| correct as f64 / truth.len() as f64),
        mismatches,
        unmatched_predictions,
    }
}
