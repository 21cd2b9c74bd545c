use serde::Serialize;

use super::ap::average_precision_101;
use super::matching::{coco_iou_thresholds, match_detections, GtBox, MatchResult};
use super::MetricsError;
use crate::dataset::ClassMap;
use crate::json::{f6, opt_f6, vec_f6};
use crate::postprocess::Detection;

pub const REPORT_SCHEMA: &str = "plateflow/report/1";

#[derive(Debug, Clone, PartialEq)]
struct Scored {
    confidence: f64,
    tp: Vec<bool>,
}

/// Mergeable accumulation of per-image match results.
///
/// `merge` is associative and commutative: predictions are kept as an
/// unordered bag and only ranked in [`EvalAccumulator::finish`], where equal
/// confidences form a single operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalAccumulator {
    iou_thresholds: Vec<f64>,
    per_class: Vec<Vec<Scored>>,
    gt_counts: Vec<usize>,
    images: usize,
}

impl EvalAccumulator {
    pub fn new(num_classes: usize, iou_thresholds: Vec<f64>) -> Self {
        Self {
            iou_thresholds,
            per_class: vec![Vec::new(); num_classes],
            gt_counts: vec![0; num_classes],
            images: 0,
        }
    }

    /// Accumulator over IoU 0.50:0.05:0.95.
    pub fn coco(num_classes: usize) -> Self {
        Self::new(num_classes, coco_iou_thresholds())
    }

    pub fn num_classes(&self) -> usize {
        self.gt_counts.len()
    }

    pub fn iou_thresholds(&self) -> &[f64] {
        &self.iou_thresholds
    }

    pub fn add(&mut self, m: MatchResult) -> Result<(), MetricsError> {
        if m.iou_thresholds != self.iou_thresholds || m.gt_per_class.len() != self.num_classes() {
            return Err(MetricsError::Incompatible);
        }
        for (c, n) in m.gt_per_class.iter().enumerate() {
            self.gt_counts[c] += n;
        }
        for p in m.predictions {
            self.per_class[p.class_id].push(Scored {
                confidence: p.confidence,
                tp: p.tp,
            });
        }
        self.images += 1;
        Ok(())
    }

    /// Match one image and add it.
    pub fn add_image(&mut self, preds: &[Detection], gts: &[GtBox]) -> Result<(), MetricsError> {
        let m = match_detections(preds, gts, &self.iou_thresholds, self.num_classes())?;
        self.add(m)
    }

    pub fn merge(mut self, other: EvalAccumulator) -> Result<Self, MetricsError> {
        if other.iou_thresholds != self.iou_thresholds || other.num_classes() != self.num_classes()
        {
            return Err(MetricsError::Incompatible);
        }
        for (c, mut v) in other.per_class.into_iter().enumerate() {
            self.per_class[c].append(&mut v);
            self.gt_counts[c] += other.gt_counts[c];
        }
        self.images += other.images;
        Ok(self)
    }

    /// `(confidence, tp)` pairs for one class at one IoU threshold index.
    pub fn scored(&self, class_id: usize, threshold_idx: usize) -> Vec<(f64, bool)> {
        self.per_class[class_id]
            .iter()
            .map(|s| (s.confidence, s.tp[threshold_idx]))
            .collect()
    }

    pub fn gt_count(&self, class_id: usize) -> usize {
        self.gt_counts[class_id]
    }

    /// Average precision for one class at one threshold index; `None` when
    /// the class has no ground truth.
    pub fn average_precision(&self, class_id: usize, threshold_idx: usize) -> Option<f64> {
        average_precision_101(
            &self.scored(class_id, threshold_idx),
            self.gt_counts[class_id],
        )
    }

    /// Class-mean precision, recall and F1 at IoU 0.5 for each confidence in
    /// `confidences`. Empty when no class has ground truth.
    pub fn sweep(&self, confidences: &[f64]) -> Result<Vec<SweepPoint>, MetricsError> {
        let t50 = self.t50()?;
        let evaluated: Vec<usize> = (0..self.num_classes())
            .filter(|&c| self.gt_counts[c] > 0)
            .collect();
        Ok(confidences
            .iter()
            .filter_map(|&conf| operating_point(self, &evaluated, t50, conf))
            .map(|o| SweepPoint {
                confidence: o.confidence,
                precision: o.precision,
                recall: o.recall,
                f1: f1(o.precision, o.recall),
            })
            .collect())
    }

    fn t50(&self) -> Result<usize, MetricsError> {
        self.iou_thresholds
            .iter()
            .position(|&t| (t - 0.5).abs() < 1e-12)
            .ok_or(MetricsError::Incompatible)
    }

    pub fn finish(
        &self,
        classes: &ClassMap,
        fixed_confidence: f64,
    ) -> Result<EvalReport, MetricsError> {
        if classes.len() != self.num_classes() {
            return Err(MetricsError::Incompatible);
        }
        let t50 = self.t50()?;

        let evaluated: Vec<usize> = (0..self.num_classes())
            .filter(|&c| self.gt_counts[c] > 0)
            .collect();
        let best = best_f1_point(self, &evaluated, t50);
        let fixed = operating_point(self, &evaluated, t50, fixed_confidence);

        let mut per_class = Vec::with_capacity(self.num_classes());
        for c in 0..self.num_classes() {
            let ap50 = self.average_precision(c, t50);
            let ap50_95 = if self.gt_counts[c] > 0 {
                let n = self.iou_thresholds.len() as f64;
                Some(
                    (0..self.iou_thresholds.len())
                        .map(|t| self.average_precision(c, t).unwrap_or(0.0))
                        .sum::<f64>()
                        / n,
                )
            } else {
                None
            };
            let (precision, recall) = match &best {
                Some(b) if self.gt_counts[c] > 0 => {
                    let (tp, fp) = counts_at(self, c, t50, b.confidence);
                    (Some(ratio(tp, tp + fp)), Some(ratio(tp, self.gt_counts[c])))
                }
                None if self.gt_counts[c] > 0 => (Some(0.0), Some(0.0)),
                _ => (None, None),
            };
            per_class.push(ClassMetrics {
                class_id: c,
                name: classes.name(c).unwrap_or_default().to_string(),
                instances: self.gt_counts[c],
                predictions: self.per_class[c].len(),
                ap50,
                ap50_95,
                precision,
                recall,
            });
        }

        let mean = |f: fn(&ClassMetrics) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = per_class.iter().filter_map(f).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let empty = evaluated.is_empty();
        Ok(EvalReport {
            schema: REPORT_SCHEMA.to_string(),
            images: self.images,
            instances: self.gt_counts.iter().sum(),
            empty_ground_truth: empty,
            map50: mean(|m| m.ap50),
            map50_95: mean(|m| m.ap50_95),
            precision: if empty {
                None
            } else {
                Some(best.map_or(0.0, |b| b.precision))
            },
            recall: if empty {
                None
            } else {
                Some(best.map_or(0.0, |b| b.recall))
            },
            f1_confidence: best.map(|b| b.confidence),
            fixed: FixedPoint {
                confidence: fixed_confidence,
                precision: fixed.map(|p| p.precision),
                recall: fixed.map(|p| p.recall),
            },
            sequence_accuracy: None,
            sweep: Vec::new(),
            classes: per_class,
            config: ReportConfig {
                iou_thresholds: self.iou_thresholds.clone(),
                interpolation: "101-point".to_string(),
                operating_point: "max-f1".to_string(),
                fixed_confidence,
            },
        })
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn counts_at(acc: &EvalAccumulator, class_id: usize, t: usize, conf: f64) -> (usize, usize) {
    acc.per_class[class_id]
        .iter()
        .filter(|s| s.confidence >= conf)
        .fold(
            (0, 0),
            |(tp, fp), s| if s.tp[t] { (tp + 1, fp) } else { (tp, fp + 1) },
        )
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Operating {
    confidence: f64,
    precision: f64,
    recall: f64,
}

/// Class-mean precision and recall when admitting predictions with
/// confidence at least `conf`. `None` when no class has ground truth.
fn operating_point(
    acc: &EvalAccumulator,
    evaluated: &[usize],
    t: usize,
    conf: f64,
) -> Option<Operating> {
    if evaluated.is_empty() {
        return None;
    }
    let (mut p, mut r) = (0.0, 0.0);
    for &c in evaluated {
        let (tp, fp) = counts_at(acc, c, t, conf);
        p += ratio(tp, tp + fp);
        r += ratio(tp, acc.gt_counts[c]);
    }
    let n = evaluated.len() as f64;
    Some(Operating {
        confidence: conf,
        precision: p / n,
        recall: r / n,
    })
}

/// Sweep every distinct confidence and keep the one maximizing the F1 of the
/// class-mean precision and recall. Ties keep the higher confidence.
fn best_f1_point(acc: &EvalAccumulator, evaluated: &[usize], t: usize) -> Option<Operating> {
    let mut events: Vec<(f64, usize, bool)> = evaluated
        .iter()
        .flat_map(|&c| {
            acc.per_class[c]
                .iter()
                .map(move |s| (s.confidence, c, s.tp[t]))
        })
        .collect();
    if events.is_empty() {
        return None;
    }
    // total order over values keeps the sweep independent of image order
    events.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let nc = acc.num_classes();
    let mut tp = vec![0usize; nc];
    let mut fp = vec![0usize; nc];
    let n = evaluated.len() as f64;
    let (mut sum_p, mut sum_r) = (0.0, 0.0);
    let mut best: Option<(f64, f64)> = None;
    let mut i = 0;
    while i < events.len() {
        let conf = events[i].0;
        let mut touched = Vec::new();
        while i < events.len() && events[i].0 == conf {
            let (_, c, is_tp) = events[i];
            if !touched.contains(&c) {
                sum_p -= ratio(tp[c], tp[c] + fp[c]);
                sum_r -= ratio(tp[c], acc.gt_counts[c]);
                touched.push(c);
            }
            if is_tp {
                tp[c] += 1;
            } else {
                fp[c] += 1;
            }
            i += 1;
        }
        for &c in &touched {
            sum_p += ratio(tp[c], tp[c] + fp[c]);
            sum_r += ratio(tp[c], acc.gt_counts[c]);
        }
        let (p, r) = (sum_p / n, sum_r / n);
        let score = f1(p, r);
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, conf));
        }
    }
    // the running sums only pick the point; report exact values from counts
    best.and_then(|(_, conf)| operating_point(acc, evaluated, t, conf))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub name: String,
    pub instances: usize,
    pub predictions: usize,
    #[serde(serialize_with = "opt_f6")]
    pub ap50: Option<f64>,
    #[serde(serialize_with = "opt_f6")]
    pub ap50_95: Option<f64>,
    #[serde(serialize_with = "opt_f6")]
    pub precision: Option<f64>,
    #[serde(serialize_with = "opt_f6")]
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPoint {
    #[serde(serialize_with = "f6")]
    pub confidence: f64,
    #[serde(serialize_with = "opt_f6")]
    pub precision: Option<f64>,
    #[serde(serialize_with = "opt_f6")]
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    #[serde(serialize_with = "f6")]
    pub confidence: f64,
    #[serde(serialize_with = "f6")]
    pub precision: f64,
    #[serde(serialize_with = "f6")]
    pub recall: f64,
    #[serde(serialize_with = "f6")]
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportConfig {
    #[serde(serialize_with = "vec_f6")]
    pub iou_thresholds: Vec<f64>,
    pub interpolation: String,
    pub operating_point: String,
    #[serde(serialize_with = "f6")]
    pub fixed_confidence: f64,
}

/// Aggregate detection metrics.
///
/// Headline precision/recall are the class means at the confidence that
/// maximizes their F1; `fixed` repeats them at the configured confidence.
/// Means skip classes without ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub schema: String,
    pub images: usize,
    pub instances: usize,
    pub empty_ground_truth: bool,
    #[serde(serialize_with = "opt_f6")]
    pub precision: Option<f64>,
    #[serde(serialize_with = "opt_f6")]
    pub recall: Option<f64>,
    #[serde(serialize_with = "opt_f6")]
    pub map50: Option<f64>,
    #[serde(serialize_with = "opt_f6")]
    pub map50_95: Option<f64>,
    #[serde(serialize_with = "opt_f6")]
    pub f1_confidence: Option<f64>,
    pub fixed: FixedPoint,
    #[serde(serialize_with = "opt_f6")]
    pub sequence_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepPoint>,
    pub classes: Vec<ClassMetrics>,
    pub config: ReportConfig,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report floats are finite")
    }

    /// Per-class table as CSV, six-decimal floats, empty cells for absent
    /// values.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out =
            String::from("class_id,name,instances,predictions,precision,recall,ap50,ap50_95\n");
        for c in &self.classes {
            let name = if c.name.contains([',', '"']) {
                format!("\"{}\"", c.name.replace('"', "\"\""))
            } else {
                c.name.clone()
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.class_id,
                name,
                c.instances,
                c.predictions,
                cell(c.precision),
                cell(c.recall),
                cell(c.ap50),
                cell(c.ap50_95)
            ));
        }
        out
    }
}

/// Evaluate a set of images given as `(predictions, ground truth)` pairs.
pub fn map_suite(
    images: &[(Vec<Detection>, Vec<GtBox>)],
    classes: &ClassMap,
    fixed_confidence: f64,
) -> Result<EvalReport, MetricsError> {
    let mut acc = EvalAccumulator::coco(classes.len());
    for (preds, gts) in images {
        acc.add_image(preds, gts)?;
    }
    acc.finish(classes, fixed_confidence)
}
