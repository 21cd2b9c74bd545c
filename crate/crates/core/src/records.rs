//! JSON Lines records exchanged between commands.
//!
//! Each file holds one JSON object per line, one line per image, every
//! object tagged with a `schema` string. Floats are written with six
//! decimals; boxes are `[x1, y1, x2, y2]` in source-image pixels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::json::{f6, vec_f6};
use crate::pipeline::PlateReading;
use crate::postprocess::Detection;

pub const DETECTIONS_SCHEMA: &str = "plateflow/detections/1";
pub const READING_SCHEMA: &str = "plateflow/reading/1";

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unsupported schema {found:?}, expected {expected:?}")]
    Schema {
        line: usize,
        found: String,
        expected: &'static str,
    },
}

fn arr(b: &BBox) -> [f64; 4] {
    b.to_array()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEntry {
    #[serde(rename = "box", serialize_with = "vec_f6")]
    pub bbox: [f64; 4],
    pub class_id: usize,
    #[serde(serialize_with = "f6")]
    pub confidence: f64,
}

impl DetectionEntry {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            bbox: arr(&d.bbox),
            class_id: d.class_id,
            confidence: d.confidence,
        }
    }

    pub fn to_detection(&self) -> Result<Detection, String> {
        let bbox = BBox::try_from(self.bbox).map_err(|e| e.to_string())?;
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        Ok(Detection {
            bbox,
            class_id: self.class_id,
            confidence: self.confidence,
        })
    }
}

/// Detections for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub schema: String,
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub detections: Vec<DetectionEntry>,
}

impl DetectionRecord {
    pub fn new(image: impl Into<String>, width: u32, height: u32, dets: &[Detection]) -> Self {
        Self {
            schema: DETECTIONS_SCHEMA.to_string(),
            image: image.into(),
            width,
            height,
            detections: dets.iter().map(DetectionEntry::from_detection).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterEntry {
    pub glyph: String,
    #[serde(rename = "box", serialize_with = "vec_f6")]
    pub bbox: [f64; 4],
    #[serde(serialize_with = "f6")]
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateEntry {
    #[serde(rename = "box", serialize_with = "vec_f6")]
    pub bbox: [f64; 4],
    #[serde(serialize_with = "f6")]
    pub confidence: f64,
    pub text: String,
    pub characters: Vec<CharacterEntry>,
}

/// Plate readings for one image. Character boxes are mapped from crop to
/// source-image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadingRecord {
    pub schema: String,
    pub image: String,
    pub plates: Vec<PlateEntry>,
}

impl ReadingRecord {
    pub fn new(image: impl Into<String>, readings: &[PlateReading]) -> Self {
        let plates = readings
            .iter()
            .map(|r| {
                let (ox, oy) = (r.crop_origin.0 as f64, r.crop_origin.1 as f64);
                PlateEntry {
                    bbox: arr(&r.plate.bbox),
                    confidence: r.plate.confidence,
                    text: r.text.clone(),
                    characters: r
                        .characters
                        .iter()
                        .map(|c| CharacterEntry {
                            glyph: c.glyph.clone(),
                            bbox: arr(&c.bbox.translate(ox, oy)),
                            confidence: c.confidence,
                        })
                        .collect(),
                }
            })
            .collect();
        Self {
            schema: READING_SCHEMA.to_string(),
            image: image.into(),
            plates,
        }
    }
}

pub fn to_json_line<T: Serialize>(record: &T) -> String {
    serde_json::to_string(record).expect("records hold finite floats")
}

fn parse_lines<T: for<'de> Deserialize<'de>>(
    text: &str,
    expected: &'static str,
) -> Result<Vec<T>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| RecordError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        let schema = value
            .get("schema")
            .and_then(|s| s.as_str())
            .unwrap_or_default();
        if schema != expected {
            return Err(RecordError::Schema {
                line: line_no,
                found: schema.to_string(),
                expected,
            });
        }
        out.push(
            serde_json::from_value(value).map_err(|e| RecordError::Parse {
                line: line_no,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

pub fn parse_detection_records(text: &str) -> Result<Vec<DetectionRecord>, RecordError> {
    parse_lines(text, DETECTIONS_SCHEMA)
}

pub fn parse_reading_records(text: &str) -> Result<Vec<ReadingRecord>, RecordError> {
    parse_lines(text, READING_SCHEMA)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::CharacterObservation;

    #[test]
    fn reading_record_maps_to_source() {
        let plate = Detection {
            bbox: BBox::new(100., 50., 200., 90.).unwrap(),
            class_id: 0,
            confidence: 0.9,
        };
        let reading = PlateReading {
            plate,
            crop_origin: (95, 48),
            crop_size: (110, 44),
            characters: vec![CharacterObservation::new(
                "A",
                10,
                BBox::new(5., 2., 15., 30.).unwrap(),
                0.75,
            )],
            text: "A".into(),
        };
        let rec = ReadingRecord::new("img", &[reading]);
        assert_eq!(rec.plates[0].characters[0].bbox, [100., 50., 110., 78.]);
        let line = to_json_line(&rec);
        assert!(line.starts_with(
            r#"{"schema":"plateflow/reading/1","image":"img","plates":[{"box":[100.000000,"#
        ));
        let back = parse_reading_records(&line).unwrap();
        assert_eq!(back, vec![rec]);
    }

    #[test]
    fn schema_is_checked() {
        let rec = DetectionRecord::new("a", 10, 10, &[]);
        let line = to_json_line(&rec);
        assert_eq!(parse_detection_records(&line).unwrap().len(), 1);
        assert!(matches!(
            parse_reading_records(&line),
            Err(RecordError::Schema { line: 1, .. })
        ));
        assert!(matches!(
            parse_detection_records("\n{oops"),
            Err(RecordError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn entry_validation() {
        let bad = DetectionEntry {
            bbox: [5., 0., 1., 1.],
            class_id: 0,
            confidence: 0.5,
        };
        assert!(bad.to_detection().is_err());
        let bad = DetectionEntry {
            bbox: [0., 0., 1., 1.],
            class_id: 0,
            confidence: 1.5,
        };
        assert!(bad.to_detection().is_err());
    }
}
