//! The two-stage reading cascade: plate detection, crop, character
//! detection, then ordering glyphs left to right into the plate string.

use std::cmp::Ordering;

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{preprocess, BackendError, DetectorBackend};
use crate::dataset::ClassMap;
use crate::geometry::BBox;
use crate::postprocess::{postprocess_image, Detection, PostprocessConfig, PostprocessError};

pub const DEFAULT_PAD_RATIO: f64 = 0.05;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
    #[error("{stage} model returned {found} class rows, expected {expected}")]
    ClassCount {
        stage: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("plate box has no area after clamping: {0:?}")]
    EmptyCrop([f64; 4]),
    #[error("pad ratio {0} must be finite and non-negative")]
    BadPadRatio(f64),
    #[error("class id {0} has no glyph in the character class map")]
    UnknownGlyph(usize),
    #[error("plate {index} ({key}): {source}")]
    Plate {
        index: usize,
        key: String,
        #[source]
        source: Box<PipelineError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub plate: PostprocessConfig,
    pub character: PostprocessConfig,
    pub pad_ratio: f64,
    /// Group glyphs into rows before ordering (two-line plates).
    pub multi_row: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            plate: PostprocessConfig {
                class_aware: true,
                ..PostprocessConfig::default()
            },
            character: PostprocessConfig {
                class_aware: false,
                ..PostprocessConfig::default()
            },
            pad_ratio: DEFAULT_PAD_RATIO,
            multi_row: false,
        }
    }
}

impl PipelineConfig {
    /// Same confidence and NMS IoU for both stages.
    pub fn with_thresholds(conf: f64, nms_iou: f64) -> Self {
        let mut cfg = Self::default();
        for stage in [&mut cfg.plate, &mut cfg.character] {
            stage.conf_threshold = conf;
            stage.iou_threshold = nms_iou;
        }
        cfg
    }
}

/// One detected glyph, boxed in plate-crop pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterObservation {
    pub glyph: String,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub x_center: f64,
    pub confidence: f64,
}

impl CharacterObservation {
    pub fn new(glyph: impl Into<String>, class_id: usize, bbox: BBox, confidence: f64) -> Self {
        Self {
            glyph: glyph.into(),
            class_id,
            x_center: (bbox.x1() + bbox.x2()) / 2.0,
            bbox,
            confidence,
        }
    }

    pub fn y_center(&self) -> f64 {
        (self.bbox.y1() + self.bbox.y2()) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlateReading {
    /// Plate box in source-image pixels.
    pub plate: Detection,
    /// Top-left corner of the crop the characters were read from.
    pub crop_origin: (u32, u32),
    pub crop_size: (u32, u32),
    pub characters: Vec<CharacterObservation>,
    pub text: String,
}

/// Left-to-right order. Equal x centers fall back to the smaller y center,
/// then the higher confidence, then the lower class id, then the box
/// corners, so the order never depends on input order.
pub fn reading_order(a: &CharacterObservation, b: &CharacterObservation) -> Ordering {
    let corners = |o: &CharacterObservation| o.bbox.to_array();
    a.x_center
        .total_cmp(&b.x_center)
        .then(a.y_center().total_cmp(&b.y_center()))
        .then(b.confidence.total_cmp(&a.confidence))
        .then(a.class_id.cmp(&b.class_id))
        .then_with(|| {
            corners(a)
                .iter()
                .zip(corners(b))
                .map(|(p, q)| p.total_cmp(&q))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Ordered glyphs and their concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequenced {
    pub characters: Vec<CharacterObservation>,
    pub text: String,
}

/// Order glyphs by ascending horizontal center and join them.
///
/// With `multi_row`, glyphs whose vertical centers spread over more than half
/// the median glyph height are first split into rows (top to bottom) at
/// vertical gaps larger than that half height; each row is then ordered left
/// to right.
pub fn sequence_characters(obs: &[CharacterObservation], multi_row: bool) -> Sequenced {
    let mut characters: Vec<CharacterObservation> = obs.to_vec();
    let rows = if multi_row {
        split_rows(&characters)
    } else {
        None
    };
    match rows {
        Some(rows) => {
            characters = rows
                .into_iter()
                .flat_map(|mut row| {
                    row.sort_by(reading_order);
                    row
                })
                .collect();
        }
        None => characters.sort_by(reading_order),
    }
    let text = characters.iter().map(|c| c.glyph.as_str()).collect();
    Sequenced { characters, text }
}

fn split_rows(obs: &[CharacterObservation]) -> Option<Vec<Vec<CharacterObservation>>> {
    if obs.len() < 2 {
        return None;
    }
    let mut heights: Vec<f64> = obs.iter().map(|o| o.bbox.height()).collect();
    heights.sort_by(f64::total_cmp);
    let n = heights.len();
    let median = if n % 2 == 1 {
        heights[n / 2]
    } else {
        (heights[n / 2 - 1] + heights[n / 2]) / 2.0
    };
    let gap = 0.5 * median;
    let mut by_y: Vec<CharacterObservation> = obs.to_vec();
    by_y.sort_by(|a, b| {
        a.y_center()
            .total_cmp(&b.y_center())
            .then(reading_order(a, b))
    });
    let spread = by_y[n - 1].y_center() - by_y[0].y_center();
    if spread <= gap {
        return None;
    }
    let mut rows: Vec<Vec<CharacterObservation>> = Vec::new();
    let mut last_y = f64::NEG_INFINITY;
    for o in by_y {
        let y = o.y_center();
        if rows.is_empty() || y - last_y > gap {
            rows.push(Vec::new());
        }
        last_y = y;
        rows.last_mut().unwrap().push(o);
    }
    Some(rows)
}

fn check_classes(
    stage: &'static str,
    raw: &crate::postprocess::RawHeadOutput,
    expected: usize,
) -> Result<(), PipelineError> {
    if raw.num_classes() != expected {
        return Err(PipelineError::ClassCount {
            stage,
            expected,
            found: raw.num_classes(),
        });
    }
    Ok(())
}

/// Plate detections in source-image pixels, best first.
pub fn detect_plates(
    image: &RgbImage,
    key: &str,
    backend: &mut dyn DetectorBackend,
    cfg: &PostprocessConfig,
) -> Result<Vec<Detection>, PipelineError> {
    let (input, t) = preprocess(image)?;
    let raw = backend.infer(key, &input)?;
    check_classes("plate", &raw, 1)?;
    Ok(postprocess_image(&raw, cfg, &t)?)
}

/// Integer crop rectangle: `x, y, width, height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// The rectangle [`crop_plate`] cuts: the plate grown by `pad_ratio` of its
/// width (height) on the left and right (top and bottom), clamped to the
/// image, then snapped outward to whole pixels.
pub fn crop_rect(
    img_w: u32,
    img_h: u32,
    plate: &BBox,
    pad_ratio: f64,
) -> Result<CropRect, PipelineError> {
    if !pad_ratio.is_finite() || pad_ratio < 0.0 {
        return Err(PipelineError::BadPadRatio(pad_ratio));
    }
    let (w, h) = (img_w as f64, img_h as f64);
    let px = pad_ratio * plate.width();
    let py = pad_ratio * plate.height();
    let left = (plate.x1() - px).max(0.0).min(w).floor();
    let top = (plate.y1() - py).max(0.0).min(h).floor();
    let right = (plate.x2() + px).min(w).max(0.0).ceil();
    let bottom = (plate.y2() + py).min(h).max(0.0).ceil();
    if plate.area() <= 0.0 || right <= left || bottom <= top {
        return Err(PipelineError::EmptyCrop(plate.to_array()));
    }
    Ok(CropRect {
        x: left as u32,
        y: top as u32,
        width: (right - left) as u32,
        height: (bottom - top) as u32,
    })
}

/// Cut the padded plate region out of `image`. Returns the crop and its
/// top-left offset in the source image.
pub fn crop_plate(
    image: &RgbImage,
    plate: &BBox,
    pad_ratio: f64,
) -> Result<(RgbImage, (u32, u32)), PipelineError> {
    let r = crop_rect(image.width(), image.height(), plate, pad_ratio)?;
    let crop = imageops::crop_imm(image, r.x, r.y, r.width, r.height).to_image();
    Ok((crop, (r.x, r.y)))
}

/// Character detections on a plate crop, in crop pixels.
pub fn recognize_characters(
    crop: &RgbImage,
    key: &str,
    backend: &mut dyn DetectorBackend,
    cfg: &PostprocessConfig,
    classes: &ClassMap,
) -> Result<Vec<CharacterObservation>, PipelineError> {
    let (input, t) = preprocess(crop)?;
    let raw = backend.infer(key, &input)?;
    check_classes("character", &raw, classes.len())?;
    let dets = postprocess_image(&raw, cfg, &t)?;
    dets.into_iter()
        .map(|d| {
            let glyph = classes
                .name(d.class_id)
                .ok_or(PipelineError::UnknownGlyph(d.class_id))?;
            Ok(CharacterObservation::new(
                glyph,
                d.class_id,
                d.bbox,
                d.confidence,
            ))
        })
        .collect()
}

/// Backend key for the `index`-th plate (in confidence order) of an image.
pub fn plate_key(image_key: &str, index: usize) -> String {
    format!("{image_key}.plate{index}")
}

/// Full cascade on one image. Readings follow plate confidence, best first.
pub fn read_plate(
    image: &RgbImage,
    image_key: &str,
    plate_backend: &mut dyn DetectorBackend,
    char_backend: &mut dyn DetectorBackend,
    cfg: &PipelineConfig,
    classes: &ClassMap,
) -> Result<Vec<PlateReading>, PipelineError> {
    let plates = detect_plates(image, image_key, plate_backend, &cfg.plate)?;
    let mut out = Vec::with_capacity(plates.len());
    for (index, plate) in plates.into_iter().enumerate() {
        let key = plate_key(image_key, index);
        let wrap = |e: PipelineError| PipelineError::Plate {
            index,
            key: key.clone(),
            source: Box::new(e),
        };
        let (crop, origin) = crop_plate(image, &plate.bbox, cfg.pad_ratio).map_err(wrap)?;
        let obs = recognize_characters(&crop, &key, char_backend, &cfg.character, classes)
            .map_err(wrap)?;
        let seq = sequence_characters(&obs, cfg.multi_row);
        out.push(PlateReading {
            plate,
            crop_origin: origin,
            crop_size: crop.dimensions(),
            characters: seq.characters,
            text: seq.text,
        });
    }
    Ok(out)
}
