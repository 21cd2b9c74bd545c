//! Plate text ground truth and its alignment with readings.
//!
//! The truth CSV has columns `image,text` and optionally `x1,y1,x2,y2`.
//! Plates are identified as `<image>#<k>`, `k` counting truth rows of that
//! image in file order. When every truth plate of an image has a box,
//! predicted plates (best first) take the unmatched truth plate of highest
//! IoU, provided it reaches 0.5; otherwise plates pair up by position.
//! Predictions left over get ids `<image>#p<j>`.

use std::collections::BTreeMap;

use serde::Deserialize;

use plateflow_core::geometry::{iou, BBox};
use plateflow_core::records::ReadingRecord;

use crate::CliError;

pub const PLATE_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TruthPlate {
    pub image: String,
    pub text: String,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Deserialize)]
struct Row {
    image: String,
    text: String,
    x1: Option<f64>,
    y1: Option<f64>,
    x2: Option<f64>,
    y2: Option<f64>,
}

pub fn parse_truth_csv(text: &str) -> Result<Vec<TruthPlate>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::Fields)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| CliError::Data(format!("truth line {line}: {e}")))?;
        let bbox = match (row.x1, row.y1, row.x2, row.y2) {
            (Some(x1), Some(y1), Some(x2), Some(y2)) => Some(
                BBox::new(x1, y1, x2, y2)
                    .map_err(|e| CliError::Data(format!("truth line {line}: {e}")))?,
            ),
            (None, None, None, None) => None,
            _ => return Err(CliError::Data(format!("truth line {line}: partial box"))),
        };
        out.push(TruthPlate {
            image: row.image,
            text: row.text,
            bbox,
        });
    }
    Ok(out)
}

/// `(predicted, truth)` maps keyed by plate id, ready for
/// [`plateflow_core::metrics::sequence_accuracy`].
pub type PlateMaps = (BTreeMap<String, String>, BTreeMap<String, String>);

pub fn align(readings: &[ReadingRecord], truth: &[TruthPlate]) -> Result<PlateMaps, CliError> {
    let mut by_image: BTreeMap<&str, Vec<&TruthPlate>> = BTreeMap::new();
    for t in truth {
        by_image.entry(t.image.as_str()).or_default().push(t);
    }
    let mut truth_map = BTreeMap::new();
    for (image, plates) in &by_image {
        for (k, t) in plates.iter().enumerate() {
            truth_map.insert(format!("{image}#{k}"), t.text.clone());
        }
    }

    let mut predicted = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for r in readings {
        if !seen.insert(r.image.as_str()) {
            return Err(CliError::Data(format!(
                "duplicate reading record for image {:?}",
                r.image
            )));
        }
        let mut order: Vec<usize> = (0..r.plates.len()).collect();
        order.sort_by(|&a, &b| r.plates[b].confidence.total_cmp(&r.plates[a].confidence));
        let plates = by_image
            .get(r.image.as_str())
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let boxed: Option<Vec<BBox>> = plates.iter().map(|t| t.bbox).collect();
        let mut taken = vec![false; plates.len()];
        for (j, &p) in order.iter().enumerate() {
            let slot = match &boxed {
                Some(boxes) if !boxes.is_empty() => {
                    let pb = BBox::try_from(r.plates[p].bbox)
                        .map_err(|e| CliError::Data(format!("image {:?}: {e}", r.image)))?;
                    let mut best: Option<(usize, f64)> = None;
                    for (k, tb) in boxes.iter().enumerate() {
                        let v = iou(&pb, tb);
                        if !taken[k] && v >= PLATE_MATCH_IOU && best.is_none_or(|(_, b)| v > b) {
                            best = Some((k, v));
                        }
                    }
                    best.map(|(k, _)| k)
                }
                _ => (j < plates.len()).then_some(j),
            };
            let id = match slot {
                Some(k) => {
                    taken[k] = true;
                    format!("{}#{k}", r.image)
                }
                None => format!("{}#p{j}", r.image),
            };
            predicted.insert(id, r.plates[p].text.clone());
        }
    }
    Ok((predicted, truth_map))
}
