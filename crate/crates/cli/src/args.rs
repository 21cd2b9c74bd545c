use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use plateflow_core::dataset::SplitName;

use crate::config::{BackendKind, OutputFormat, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "plateflow",
    version,
    about = "License plate reading and detection metrics"
)]
pub struct Cli {
    /// Flat `key = value` settings file; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Suppress console summaries and progress.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one detection stage and write boxes per image.
    Detect {
        /// Image file or directory of images.
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::Plate)]
        stage: StageArg,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Read plate strings: plate detection, crop, character detection, ordering.
    Read {
        /// Image file or directory of images.
        input: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score predictions against a YOLO dataset split.
    Eval {
        /// Detections or readings file (JSON Lines).
        predictions: PathBuf,
        /// Dataset root containing `<split>/images` and `<split>/labels`.
        dataset: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Also report precision/recall/F1 at confidences 0.05, 0.10, ..., 0.95.
        #[arg(long)]
        sweep: bool,
        /// Plate text ground truth (CSV); adds sequence accuracy for readings.
        #[arg(long, value_name = "CSV")]
        truth: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Summarize a dataset split: counts, negatives, box sizes.
    Stats {
        dataset: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Exact-match plate string accuracy of readings against a truth CSV.
    SeqEval {
        /// Readings file (JSON Lines).
        readings: PathBuf,
        /// CSV with columns image,text and optional x1,y1,x2,y2.
        truth: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print the effective settings in config-file syntax.
    Config {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Plate,
    Char,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: SplitName,
    /// Class manifest; defaults to `<dataset>/data.yaml`, else the plate class.
    #[arg(long, value_name = "YAML")]
    pub classes: Option<PathBuf>,
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    s.parse()
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Inference backend.
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<BackendKind>,
    /// Recorded tensor directory (falls back to $PLATEFLOW_FIXTURES).
    #[arg(long, value_name = "DIR")]
    pub fixtures: Option<PathBuf>,
    /// Plate detector ONNX file (runtime backend).
    #[arg(long, value_name = "ONNX")]
    pub plate_model: Option<PathBuf>,
    /// Character detector ONNX file (runtime backend).
    #[arg(long, value_name = "ONNX")]
    pub char_model: Option<PathBuf>,
    /// Character class manifest; defaults to 0-9 then A-Z.
    #[arg(long, value_name = "YAML")]
    pub char_classes: Option<PathBuf>,
    /// Confidence threshold (eval: fixed operating point).
    #[arg(long)]
    pub conf: Option<f64>,
    /// NMS IoU threshold.
    #[arg(long)]
    pub nms_iou: Option<f64>,
    /// Crop padding as a fraction of plate width and height.
    #[arg(long)]
    pub pad: Option<f64>,
    /// Split characters into rows before ordering (two-line plates).
    #[arg(long)]
    pub rows: bool,
    /// Worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output file, written atomically; stdout when absent.
    #[arg(long, short, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<OutputFormat>,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    s.parse()
}

fn parse_format(s: &str) -> Result<OutputFormat, String> {
    s.parse()
}

impl RunArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            backend: self.backend,
            fixtures: self.fixtures.clone(),
            plate_model: self.plate_model.clone(),
            char_model: self.char_model.clone(),
            plate_variant: None,
            char_variant: None,
            char_classes: self.char_classes.clone(),
            conf: self.conf,
            nms_iou: self.nms_iou,
            pad: self.pad,
            rows: self.rows.then_some(true),
            workers: self.workers,
            out: self.out.clone(),
            format: self.format,
        }
    }
}
