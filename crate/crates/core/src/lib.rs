//! License plate reading and detection evaluation.
//!
//! The cascade runs a plate detector, crops each plate, runs a character
//! detector on the crop and orders the glyphs left to right. Inference sits
//! behind [`backend::DetectorBackend`], so everything here also runs against
//! recorded head tensors.

pub mod backend;
pub mod dataset;
pub mod geometry;
pub mod json;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;
pub mod records;

pub use backend::{DetectorBackend, ModelDescriptor, ModelRole, RecordedBackend};
pub use dataset::{ClassMap, GroundTruthAnnotation};
pub use geometry::{iou, BBox, LetterboxTransform, NormBox};
pub use metrics::{EvalReport, GtBox};
pub use pipeline::{CharacterObservation, PipelineConfig, PlateReading};
pub use postprocess::{Detection, PostprocessConfig, RawHeadOutput};
