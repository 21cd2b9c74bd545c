//! Anchor-free detector head decoding and greedy non-maximum suppression.

use std::cmp::Ordering;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, unmap_box, BBox, LetterboxTransform};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;

/// Magic bytes opening every `.rawhead` file.
pub const RAWHEAD_MAGIC: [u8; 4] = *b"RHD0";
pub const RAWHEAD_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("raw head needs at least 5 rows and 1 column, got {rows}x{cols}")]
    BadShape { rows: usize, cols: usize },
    #[error("raw head data length {len} does not match {rows}x{cols}")]
    LengthMismatch {
        len: usize,
        rows: usize,
        cols: usize,
    },
    #[error("non-finite value in anchor column {column}, row {row}")]
    NonFinite { column: usize, row: usize },
    #[error("class score {value} outside [0, 1] in anchor column {column}")]
    ScoreOutOfRange { column: usize, value: f32 },
    #[error("threshold {name} = {value} outside [0, 1]")]
    BadThreshold { name: &'static str, value: f64 },
    #[error("expected {expected} class rows, raw head has {found}")]
    ClassCount { expected: usize, found: usize },
    #[error("not a rawhead file: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("rawhead io: {0}")]
    Io(#[from] io::Error),
}

/// Detector head output: `(4 + num_classes) x num_anchors`, row-major.
///
/// Rows 0..4 hold box `cx, cy, w, h` in model-input pixels, the remaining rows
/// one score per class.
#[derive(Debug, Clone, PartialEq)]
pub struct RawHeadOutput {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl RawHeadOutput {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, PostprocessError> {
        if rows < 5 || cols == 0 {
            return Err(PostprocessError::BadShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(PostprocessError::LengthMismatch {
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn num_anchors(&self) -> usize {
        self.cols
    }

    pub fn num_classes(&self) -> usize {
        self.rows - 4
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    /// Parse the `.rawhead` encoding.
    ///
    /// Layout (all little-endian): bytes 0..4 magic `RHD0`, 4..8 `u32` rows,
    /// 8..12 `u32` cols, 12..16 `u32` reserved (written as 0, ignored on
    /// read), then `rows * cols` `f32` values in row-major order.
    pub fn read_from(mut r: impl Read) -> Result<Self, PostprocessError> {
        let mut header = [0u8; RAWHEAD_HEADER_LEN];
        r.read_exact(&mut header)?;
        let magic: [u8; 4] = header[0..4].try_into().unwrap();
        if magic != RAWHEAD_MAGIC {
            return Err(PostprocessError::BadMagic(magic));
        }
        let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        if rows < 5 || cols == 0 {
            return Err(PostprocessError::BadShape { rows, cols });
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or(PostprocessError::BadShape { rows, cols })?;
        if body.len() != expected {
            return Err(PostprocessError::LengthMismatch {
                len: body.len() / 4,
                rows,
                cols,
            });
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, cols, data)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), PostprocessError> {
        w.write_all(&RAWHEAD_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        let mut body = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            body.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PostprocessError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
}

/// Ordering used wherever detections are ranked: confidence descending, then
/// smaller `x1`, smaller `y1`, lower class id.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.bbox.x1().total_cmp(&b.bbox.x1()))
        .then(a.bbox.y1().total_cmp(&b.bbox.y1()))
        .then(a.class_id.cmp(&b.class_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub class_aware: bool,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            iou_threshold: DEFAULT_NMS_IOU,
            class_aware: true,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<(), PostprocessError> {
        check_unit("conf_threshold", self.conf_threshold)?;
        check_unit("iou_threshold", self.iou_threshold)
    }
}

fn check_unit(name: &'static str, value: f64) -> Result<(), PostprocessError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(PostprocessError::BadThreshold { name, value })
    }
}

/// Turn each anchor column into at most one detection: the arg-max class,
/// kept when its score reaches `conf_threshold` and the box has positive area.
pub fn decode(
    raw: &RawHeadOutput,
    conf_threshold: f64,
) -> Result<Vec<Detection>, PostprocessError> {
    check_unit("conf_threshold", conf_threshold)?;
    let mut out = Vec::new();
    for col in 0..raw.num_anchors() {
        let mut best = (0usize, f32::NEG_INFINITY);
        for row in 0..raw.rows() {
            let v = raw.get(row, col);
            if !v.is_finite() {
                return Err(PostprocessError::NonFinite { column: col, row });
            }
            if row >= 4 {
                if !(0.0..=1.0).contains(&v) {
                    return Err(PostprocessError::ScoreOutOfRange {
                        column: col,
                        value: v,
                    });
                }
                // first maximum wins on equal scores
                if v > best.1 {
                    best = (row - 4, v);
                }
            }
        }
        let score = best.1 as f64;
        if score < conf_threshold {
            continue;
        }
        let (cx, cy, w, h) = (
            raw.get(0, col) as f64,
            raw.get(1, col) as f64,
            raw.get(2, col) as f64,
            raw.get(3, col) as f64,
        );
        if w <= 0.0 || h <= 0.0 {
            continue;
        }
        let bbox = match BBox::from_cxcywh(cx, cy, w, h) {
            Ok(b) if b.area() > 0.0 => b,
            _ => continue,
        };
        out.push(Detection {
            bbox,
            class_id: best.0,
            confidence: score,
        });
    }
    Ok(out)
}

/// Greedy NMS. A detection survives iff its IoU with every already kept
/// detection (same class only, when `class_aware`) is at most
/// `iou_threshold`. Output follows [`rank_order`]. Zero-area boxes are
/// dropped.
pub fn nms(dets: &[Detection], iou_threshold: f64, class_aware: bool) -> Vec<Detection> {
    let mut sorted: Vec<Detection> = dets
        .iter()
        .copied()
        .filter(|d| d.bbox.area() > 0.0)
        .collect();
    sorted.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let suppressed = kept.iter().any(|k| {
            (!class_aware || k.class_id == d.class_id) && iou(&k.bbox, &d.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Decode, suppress, then map every box back into source-image pixels.
pub fn postprocess_image(
    raw: &RawHeadOutput,
    cfg: &PostprocessConfig,
    t: &LetterboxTransform,
) -> Result<Vec<Detection>, PostprocessError> {
    cfg.validate()?;
    let decoded = decode(raw, cfg.conf_threshold)?;
    let kept = nms(&decoded, cfg.iou_threshold, cfg.class_aware);
    Ok(kept
        .into_iter()
        .map(|d| Detection {
            bbox: unmap_box(&d.bbox, t),
            ..d
        })
        .collect())
}
