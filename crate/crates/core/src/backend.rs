//! Inference backends.
//!
//! The pipeline never talks to an ML runtime directly: it hands a
//! preprocessed input and an identity key to a [`DetectorBackend`] and gets a
//! [`RawHeadOutput`] back. [`RecordedBackend`] replays `.rawhead` fixtures by
//! key; the ONNX runtime backend is behind the `runtime` feature.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{letterbox_plan, LetterboxTransform, MODEL_INPUT_SIDE, PAD_VALUE};
use crate::postprocess::{PostprocessError, RawHeadOutput};

pub const RAWHEAD_EXTENSION: &str = "rawhead";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no recorded tensor for key {0:?}")]
    MissingKey(String),
    #[error("malformed fixture {path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: PostprocessError,
    },
    #[error("fixture directory {0} does not exist")]
    MissingDirectory(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what} shape mismatch: expected {expected}, found {found:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        found: Vec<usize>,
    },
    #[error("invalid model descriptor: {0}")]
    Descriptor(String),
    #[error("built without the `runtime` feature; use the recorded backend")]
    RuntimeUnavailable,
    #[error("model runtime: {0}")]
    Runtime(String),
    #[error("image: {0}")]
    Image(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Plate,
    Character,
}

impl ModelRole {
    pub fn num_classes(self) -> usize {
        match self {
            ModelRole::Plate => 1,
            ModelRole::Character => 36,
        }
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelRole::Plate => "plate",
            ModelRole::Character => "character",
        })
    }
}

/// What a model is expected to look like.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub role: ModelRole,
    pub num_classes: usize,
    pub input_side: u32,
    /// Free-form provenance, e.g. the detector variant (`n`, `s`, `m`).
    pub variant: String,
}

impl ModelDescriptor {
    pub fn new(role: ModelRole, variant: impl Into<String>) -> Self {
        Self {
            role,
            num_classes: role.num_classes(),
            input_side: MODEL_INPUT_SIDE,
            variant: variant.into(),
        }
    }

    pub fn plate(variant: impl Into<String>) -> Self {
        Self::new(ModelRole::Plate, variant)
    }

    pub fn character(variant: impl Into<String>) -> Self {
        Self::new(ModelRole::Character, variant)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.num_classes != self.role.num_classes() {
            return Err(BackendError::Descriptor(format!(
                "{} model must have {} classes, descriptor says {}",
                self.role,
                self.role.num_classes(),
                self.num_classes
            )));
        }
        if self.input_side == 0 {
            return Err(BackendError::Descriptor(
                "input side must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_rows(&self) -> usize {
        4 + self.num_classes
    }

    /// Check a declared output shape, `[rows, anchors]` or
    /// `[1, rows, anchors]`, and return the anchor count.
    pub fn check_output_shape(&self, shape: &[usize]) -> Result<usize, BackendError> {
        let dims = match shape {
            [1, r, a] => Some((*r, *a)),
            [r, a] => Some((*r, *a)),
            _ => None,
        };
        match dims {
            Some((r, a)) if r == self.head_rows() && a > 0 => Ok(a),
            _ => Err(BackendError::ShapeMismatch {
                what: "output",
                expected: format!("[1, {}, A]", self.head_rows()),
                found: shape.to_vec(),
            }),
        }
    }

    pub fn check_input_shape(&self, shape: &[usize]) -> Result<(), BackendError> {
        let s = self.input_side as usize;
        if shape == [1, 3, s, s] {
            Ok(())
        } else {
            Err(BackendError::ShapeMismatch {
                what: "input",
                expected: format!("[1, 3, {s}, {s}]"),
                found: shape.to_vec(),
            })
        }
    }

    pub fn check_raw(&self, raw: &RawHeadOutput) -> Result<(), BackendError> {
        self.check_output_shape(&[raw.rows(), raw.num_anchors()])
            .map(|_| ())
    }
}

/// Letterboxed, channel-first RGB tensor with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub side: u32,
    /// `3 * side * side` values, planes in R, G, B order.
    pub data: Vec<f32>,
}

impl ModelInput {
    pub fn shape(&self) -> [usize; 4] {
        let s = self.side as usize;
        [1, 3, s, s]
    }

    pub fn at(&self, channel: usize, y: u32, x: u32) -> f32 {
        let s = self.side as usize;
        self.data[channel * s * s + y as usize * s + x as usize]
    }
}

/// Letterbox to the default 640 side. See [`preprocess_to`].
pub fn preprocess(image: &RgbImage) -> Result<(ModelInput, LetterboxTransform), BackendError> {
    preprocess_to(image, MODEL_INPUT_SIDE)
}

/// Aspect-preserving bilinear resize onto a `side x side` canvas filled with
/// 114, then `/255` scaling into a CHW tensor.
///
/// The resized content is placed at `round(pad - 0.1)` on each axis; the
/// returned transform carries the exact fractional padding.
pub fn preprocess_to(
    image: &RgbImage,
    side: u32,
) -> Result<(ModelInput, LetterboxTransform), BackendError> {
    let (w, h) = image.dimensions();
    let t = letterbox_plan(w, h, side).map_err(|e| BackendError::Image(e.to_string()))?;
    let (nw, nh) = t.resized_dims();
    let mut canvas = RgbImage::from_pixel(side, side, Rgb([PAD_VALUE; 3]));
    let left = ((t.pad_x - 0.1).round().max(0.0) as u32).min(side - nw);
    let top = ((t.pad_y - 0.1).round().max(0.0) as u32).min(side - nh);
    if (nw, nh) == (w, h) {
        imageops::replace(&mut canvas, image, left as i64, top as i64);
    } else {
        let resized = imageops::resize(image, nw, nh, imageops::FilterType::Triangle);
        imageops::replace(&mut canvas, &resized, left as i64, top as i64);
    }

    let plane = (side * side) as usize;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in canvas.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    Ok((ModelInput { side, data }, t))
}

/// Source of raw detector head tensors.
///
/// Implementations must be deterministic: the same key and input give the
/// same tensor. One instance is used by one thread at a time.
pub trait DetectorBackend {
    fn infer(&mut self, key: &str, input: &ModelInput) -> Result<RawHeadOutput, BackendError>;
}

impl<B: DetectorBackend + ?Sized> DetectorBackend for Box<B> {
    fn infer(&mut self, key: &str, input: &ModelInput) -> Result<RawHeadOutput, BackendError> {
        (**self).infer(key, input)
    }
}

/// Replays `<key>.rawhead` files from a directory. The input tensor is
/// ignored. Cloning is cheap and clones share the key index.
#[derive(Debug, Clone)]
pub struct RecordedBackend {
    dir: PathBuf,
    keys: Arc<BTreeSet<String>>,
    descriptor: Option<ModelDescriptor>,
}

impl RecordedBackend {
    pub fn open(dir: &Path) -> Result<Self, BackendError> {
        if !dir.is_dir() {
            return Err(BackendError::MissingDirectory(dir.to_path_buf()));
        }
        let io = |source| BackendError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut keys = BTreeSet::new();
        for entry in fs::read_dir(dir).map_err(io)? {
            let entry = entry.map_err(io)?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(key) = name.strip_suffix(&format!(".{RAWHEAD_EXTENSION}")) {
                keys.insert(key.to_string());
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            keys: Arc::new(keys),
            descriptor: None,
        })
    }

    /// Also check every replayed tensor against `desc`.
    pub fn with_descriptor(mut self, desc: ModelDescriptor) -> Result<Self, BackendError> {
        desc.validate()?;
        self.descriptor = Some(desc);
        Ok(self)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.keys.iter().map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.keys.contains(key)
    }

    pub fn load(&self, key: &str) -> Result<RawHeadOutput, BackendError> {
        if !self.keys.contains(key) {
            return Err(BackendError::MissingKey(key.to_string()));
        }
        let path = self.dir.join(format!("{key}.{RAWHEAD_EXTENSION}"));
        let raw = RawHeadOutput::load(&path).map_err(|source| BackendError::Format {
            path: path.clone(),
            source,
        })?;
        if let Some(d) = &self.descriptor {
            d.check_raw(&raw)?;
        }
        Ok(raw)
    }
}

impl DetectorBackend for RecordedBackend {
    fn infer(&mut self, key: &str, _input: &ModelInput) -> Result<RawHeadOutput, BackendError> {
        self.load(key)
    }
}

#[cfg(feature = "runtime")]
mod runtime {
    use super::*;
    use tract_onnx::prelude::*;

    type Plan = SimplePlan<TypedFact, Box<dyn TypedOp>, Graph<TypedFact, Box<dyn TypedOp>>>;

    /// Executes an ONNX detector with a `1x3xSxS` input and a
    /// `(4 + nc) x A` output (optionally with a leading batch axis).
    pub struct RuntimeBackend {
        plan: Plan,
        descriptor: ModelDescriptor,
    }

    impl std::fmt::Debug for RuntimeBackend {
        fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            f.debug_struct("RuntimeBackend")
                .field("descriptor", &self.descriptor)
                .finish()
        }
    }

    fn rt<E: std::fmt::Display>(e: E) -> BackendError {
        BackendError::Runtime(e.to_string())
    }

    impl RuntimeBackend {
        pub fn load(model_file: &Path, desc: ModelDescriptor) -> Result<Self, BackendError> {
            desc.validate()?;
            let s = desc.input_side as usize;
            let model = tract_onnx::onnx()
                .model_for_path(model_file)
                .map_err(rt)?
                .with_input_fact(0, f32::fact([1, 3, s, s]).into())
                .map_err(rt)?
                .into_typed()
                .map_err(rt)?;
            let out_fact = model.output_fact(0).map_err(rt)?;
            let shape: Vec<usize> = out_fact
                .shape
                .as_concrete()
                .ok_or_else(|| BackendError::Runtime("output shape is not concrete".into()))?
                .to_vec();
            desc.check_output_shape(&shape)?;
            let plan = model
                .into_optimized()
                .map_err(rt)?
                .into_runnable()
                .map_err(rt)?;
            Ok(Self {
                plan,
                descriptor: desc,
            })
        }

        pub fn descriptor(&self) -> &ModelDescriptor {
            &self.descriptor
        }
    }

    impl DetectorBackend for RuntimeBackend {
        fn infer(&mut self, _key: &str, input: &ModelInput) -> Result<RawHeadOutput, BackendError> {
            self.descriptor.check_input_shape(&input.shape())?;
            let s = input.side as usize;
            let tensor = tract_ndarray::Array4::from_shape_vec((1, 3, s, s), input.data.clone())
                .map_err(rt)?;
            let outputs = self
                .plan
                .run(tvec!(Tensor::from(tensor).into()))
                .map_err(rt)?;
            let out = outputs[0].to_array_view::<f32>().map_err(rt)?;
            let anchors = self.descriptor.check_output_shape(out.shape())?;
            let data: Vec<f32> = out.iter().copied().collect();
            RawHeadOutput::new(self.descriptor.head_rows(), anchors, data)
                .map_err(|e| BackendError::Runtime(e.to_string()))
        }
    }
}

#[cfg(feature = "runtime")]
pub use runtime::RuntimeBackend;

/// Load an ONNX model as a backend, validating its shapes against `desc`.
#[cfg(feature = "runtime")]
pub fn runtime_backend(
    model_file: &Path,
    desc: ModelDescriptor,
) -> Result<Box<dyn DetectorBackend + Send>, BackendError> {
    Ok(Box::new(RuntimeBackend::load(model_file, desc)?))
}

#[cfg(not(feature = "runtime"))]
pub fn runtime_backend(
    _model_file: &Path,
    desc: ModelDescriptor,
) -> Result<Box<dyn DetectorBackend + Send>, BackendError> {
    desc.validate()?;
    Err(BackendError::RuntimeUnavailable)
}

pub fn recorded_backend(fixture_dir: &Path) -> Result<RecordedBackend, BackendError> {
    RecordedBackend::open(fixture_dir)
}
