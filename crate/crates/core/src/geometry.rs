//! Box algebra and the letterbox mapping between source images and the
//! square detector input.
//!
//! Pixel coordinates are continuous with a top-left origin, x to the right and
//! y down. Box area is `(x2 - x1) * (y2 - y1)`; there is no `+1` convention.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of the square model input.
pub const MODEL_INPUT_SIDE: u32 = 640;

/// Fill value used for the letterbox border, per channel.
pub const PAD_VALUE: u8 = 114;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box coordinates must be finite, got ({0}, {1}, {2}, {3})")]
    NonFinite(f64, f64, f64, f64),
    #[error("box corners out of order: ({0}, {1}, {2}, {3})")]
    Inverted(f64, f64, f64, f64),
    #[error("normalized box out of range: cx={cx} cy={cy} w={w} h={h}")]
    NormOutOfRange { cx: f64, cy: f64, w: f64, h: f64 },
    #[error("image dimensions must be positive, got {0}x{1}")]
    EmptyDimensions(u32, u32),
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite(x1, y1, x2, y2));
        }
        if x1 > x2 || y1 > y2 {
            return Err(GeometryError::Inverted(x1, y1, x2, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box from center, width and height. Fails for negative extents.
    pub fn from_cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.x1
    }

    #[inline]
    pub fn y1(&self) -> f64 {
        self.y1
    }

    #[inline]
    pub fn x2(&self) -> f64 {
        self.x2
    }

    #[inline]
    pub fn y2(&self) -> f64 {
        self.y2
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clamp into `[0, w] x [0, h]`.
    pub fn clamp_to(&self, w: f64, h: f64) -> Self {
        let cx = |v: f64| v.clamp(0.0, w);
        let cy = |v: f64| v.clamp(0.0, h);
        Self {
            x1: cx(self.x1),
            y1: cy(self.y1),
            x2: cx(self.x2),
            y2: cy(self.y2),
        }
    }

    /// Shift by `(dx, dy)`.
    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Zero when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// YOLO-style normalized box: center and size as fractions of the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl NormBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let extent = |v: f64| v > 0.0 && v <= 1.0;
        if unit(cx) && unit(cy) && extent(w) && extent(h) {
            Ok(Self { cx, cy, w, h })
        } else {
            Err(GeometryError::NormOutOfRange { cx, cy, w, h })
        }
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Inverse of [`norm_to_pixels`] for boxes that lie inside the image.
    pub fn from_pixels(b: &BBox, img_w: u32, img_h: u32) -> Result<Self, GeometryError> {
        let (w, h) = (img_w as f64, img_h as f64);
        let (cx, cy) = b.center();
        Self::new(cx / w, cy / h, b.width() / w, b.height() / h)
    }
}

/// Convert a normalized box to pixels, clamped to the image.
pub fn norm_to_pixels(n: &NormBox, img_w: u32, img_h: u32) -> BBox {
    let (w, h) = (img_w as f64, img_h as f64);
    let bw = n.w * w;
    let bh = n.h * h;
    let cx = n.cx * w;
    let cy = n.cy * h;
    BBox {
        x1: cx - bw / 2.0,
        y1: cy - bh / 2.0,
        x2: cx + bw / 2.0,
        y2: cy + bh / 2.0,
    }
    .clamp_to(w, h)
}

/// Aspect-preserving resize plus symmetric padding onto a fixed canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub src_w: u32,
    pub src_h: u32,
    pub dst_w: u32,
    pub dst_h: u32,
}

impl LetterboxTransform {
    pub fn identity(w: u32, h: u32) -> Self {
        Self {
            scale: 1.0,
            pad_x: 0.0,
            pad_y: 0.0,
            src_w: w,
            src_h: h,
            dst_w: w,
            dst_h: h,
        }
    }

    /// Size of the resized content before padding, in whole pixels.
    pub fn resized_dims(&self) -> (u32, u32) {
        let w = (self.src_w as f64 * self.scale).round() as u32;
        let h = (self.src_h as f64 * self.scale).round() as u32;
        (w.clamp(1, self.dst_w), h.clamp(1, self.dst_h))
    }

    pub fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.pad_x, y * self.scale + self.pad_y)
    }

    pub fn unmap_point(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale)
    }
}

/// Plan a letterbox from `src_w x src_h` onto a square `dst x dst` canvas.
pub fn letterbox_plan(
    src_w: u32,
    src_h: u32,
    dst: u32,
) -> Result<LetterboxTransform, GeometryError> {
    letterbox_plan_rect(src_w, src_h, dst, dst)
}

pub fn letterbox_plan_rect(
    src_w: u32,
    src_h: u32,
    dst_w: u32,
    dst_h: u32,
) -> Result<LetterboxTransform, GeometryError> {
    if src_w == 0 || src_h == 0 {
        return Err(GeometryError::EmptyDimensions(src_w, src_h));
    }
    if dst_w == 0 || dst_h == 0 {
        return Err(GeometryError::EmptyDimensions(dst_w, dst_h));
    }
    let scale = (dst_w as f64 / src_w as f64).min(dst_h as f64 / src_h as f64);
    Ok(LetterboxTransform {
        scale,
        pad_x: (dst_w as f64 - scale * src_w as f64) / 2.0,
        pad_y: (dst_h as f64 - scale * src_h as f64) / 2.0,
        src_w,
        src_h,
        dst_w,
        dst_h,
    })
}

/// Source space to model space. No clamping.
pub fn map_box(b: &BBox, t: &LetterboxTransform) -> BBox {
    let (x1, y1) = t.map_point(b.x1, b.y1);
    let (x2, y2) = t.map_point(b.x2, b.y2);
    BBox { x1, y1, x2, y2 }
}

/// Model space back to source space, clamped to the source image.
pub fn unmap_box(b: &BBox, t: &LetterboxTransform) -> BBox {
    let (x1, y1) = t.unmap_point(b.x1, b.y1);
    let (x2, y2) = t.unmap_point(b.x2, b.y2);
    BBox { x1, y1, x2, y2 }.clamp_to(t.src_w as f64, t.src_h as f64)
}
