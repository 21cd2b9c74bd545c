//! Detection and reading metrics: greedy IoU matching, 101-point AP,
//! mAP50 / mAP50-95, exact-match sequence accuracy and loss diagnostics.

mod ap;
mod loss;
mod matching;
mod report;
mod sequence;

use thiserror::Error;

pub use ap::{average_precision_101, pr_curve, precision_envelope, PrPoint, RECALL_SAMPLES};
pub use loss::{bbox_loss, cls_loss, cross_entropy, squared_error, LossSample};
pub use matching::{coco_iou_thresholds, match_detections, GtBox, MatchResult, MatchedPrediction};
pub use report::{
    map_suite, ClassMetrics, EvalAccumulator, EvalReport, FixedPoint, ReportConfig, SweepPoint,
    REPORT_SCHEMA,
};
pub use sequence::{sequence_accuracy, SequenceMismatch, SequenceReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("class id {class_id} outside class map of {num_classes}")]
    ClassOutOfRange { class_id: usize, num_classes: usize },
    #[error("accumulators disagree on classes or IoU thresholds")]
    Incompatible,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("truth vector is not one-hot")]
    NotOneHot,
    #[error("probability {value} at index {index} outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("zero probability on true class {class}: loss is infinite")]
    InfiniteLoss { class: usize },
}
