use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use plateflow_core::backend::{
    recorded_backend, runtime_backend, DetectorBackend, ModelDescriptor, RecordedBackend,
};
use plateflow_core::dataset::{
    dataset_stats, image_id, is_image_file, list_images, load_class_map, load_split, ClassMap,
    ClassPreset, DatasetStats, SplitName,
};
use plateflow_core::metrics::{
    sequence_accuracy, EvalAccumulator, EvalReport, GtBox, MetricsError, SequenceReport,
};
use plateflow_core::pipeline::{detect_plates, read_plate, recognize_characters};
use plateflow_core::postprocess::Detection;
use plateflow_core::records::{
    parse_detection_records, parse_reading_records, DetectionRecord, ReadingRecord,
    DETECTIONS_SCHEMA, READING_SCHEMA,
};

use crate::args::{Cli, Command, StageArg};
use crate::config::{BackendKind, OutputFormat, Overrides, RunConfig, FIXTURES_ENV};
use crate::output::{
    detections_csv, emit, eval_table, json_lines, readings_csv, sequence_text, stats_text,
};
use crate::truth::{align, parse_truth_csv};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Plate,
    Character,
}

type Backend = Box<dyn DetectorBackend + Send>;

/// Makes one backend per worker thread.
#[derive(Debug, Clone)]
enum BackendFactory {
    Recorded(RecordedBackend),
    Runtime(PathBuf, ModelDescriptor),
}

impl BackendFactory {
    fn make(&self) -> Result<Backend, CliError> {
        match self {
            BackendFactory::Recorded(b) => Ok(Box::new(b.clone())),
            BackendFactory::Runtime(path, desc) => Ok(runtime_backend(path, desc.clone())?),
        }
    }
}

fn factory(cfg: &RunConfig, stage: Stage) -> Result<BackendFactory, CliError> {
    let desc = match stage {
        Stage::Plate => ModelDescriptor::plate(cfg.plate_variant.clone()),
        Stage::Character => ModelDescriptor::character(cfg.char_variant.clone()),
    };
    let f = match cfg.backend {
        BackendKind::Recorded => {
            let dir = cfg.fixtures.as_ref().ok_or_else(|| {
                CliError::Backend(format!(
                    "no fixture directory: pass --fixtures or set {FIXTURES_ENV}"
                ))
            })?;
            BackendFactory::Recorded(recorded_backend(dir)?.with_descriptor(desc)?)
        }
        BackendKind::Runtime => {
            let (flag, model) = match stage {
                Stage::Plate => ("--plate-model", &cfg.plate_model),
                Stage::Character => ("--char-model", &cfg.char_model),
            };
            let model = model.clone().ok_or_else(|| {
                CliError::Config(format!("{flag} is required with --backend runtime"))
            })?;
            BackendFactory::Runtime(model, desc)
        }
    };
    // fail before touching any image when the backend cannot be built
    f.make()?;
    Ok(f)
}

fn char_classes(cfg: &RunConfig) -> Result<ClassMap, CliError> {
    match &cfg.char_classes {
        Some(p) => Ok(load_class_map(p, Some(ClassPreset::Character))?),
        None => Ok(ClassMap::characters()),
    }
}

/// Image files named by `input`: the file itself, or the images directly
/// inside a directory, sorted by name.
fn input_images(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    let files = if input.is_dir() {
        list_images(input)?
    } else if input.is_file() && is_image_file(input) {
        vec![input.to_path_buf()]
    } else {
        return Err(CliError::Data(format!(
            "{} is not an image or a directory",
            input.display()
        )));
    };
    let mut ids = BTreeSet::new();
    for f in &files {
        if !ids.insert(image_id(f)) {
            return Err(CliError::Data(format!(
                "duplicate image id {:?}",
                image_id(f)
            )));
        }
    }
    Ok(files)
}

fn load_rgb(path: &Path) -> Result<image::RgbImage, CliError> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| CliError::Data(format!("cannot read image {}: {e}", path.display())))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {workers} workers: {e}")))
}

/// Apply `f` to every item on `workers` threads, each thread holding its own
/// state from `init`. Results keep input order; the first failing item in
/// input order decides the error.
fn par_map<I, S, T, Init, F>(
    items: &[I],
    workers: usize,
    init: Init,
    f: F,
) -> Result<Vec<T>, CliError>
where
    I: Sync,
    T: Send,
    Init: Fn() -> Result<S, CliError> + Sync + Send,
    F: Fn(&mut S, &I) -> Result<T, CliError> + Sync + Send,
{
    let results: Vec<Result<T, CliError>> = pool(workers)?.install(|| {
        items
            .par_iter()
            .map_init(&init, |state, item| match state {
                Ok(s) => f(s, item),
                Err(e) => Err(e.clone()),
            })
            .collect()
    });
    results.into_iter().collect()
}

/// Run one detection stage over an image or directory of images.
pub fn cmd_detect(
    input: &Path,
    stage: Stage,
    cfg: &RunConfig,
) -> Result<Vec<DetectionRecord>, CliError> {
    let images = input_images(input)?;
    let backends = factory(cfg, stage)?;
    let pipeline = cfg.pipeline();
    let classes = char_classes(cfg)?;
    par_map(
        &images,
        cfg.workers,
        || backends.make(),
        |backend, path| {
            let img = load_rgb(path)?;
            let key = image_id(path);
            let dets = match stage {
                Stage::Plate => detect_plates(&img, &key, backend.as_mut(), &pipeline.plate)?,
                Stage::Character => recognize_characters(
                    &img,
                    &key,
                    backend.as_mut(),
                    &pipeline.character,
                    &classes,
                )?
                .into_iter()
                .map(|o| Detection {
                    bbox: o.bbox,
                    class_id: o.class_id,
                    confidence: o.confidence,
                })
                .collect(),
            };
            Ok(DetectionRecord::new(key, img.width(), img.height(), &dets))
        },
    )
}

/// Read plates in an image or directory of images.
pub fn cmd_read(input: &Path, cfg: &RunConfig) -> Result<Vec<ReadingRecord>, CliError> {
    let images = input_images(input)?;
    let plates = factory(cfg, Stage::Plate)?;
    let chars = factory(cfg, Stage::Character)?;
    let pipeline = cfg.pipeline();
    let classes = char_classes(cfg)?;
    par_map(
        &images,
        cfg.workers,
        || Ok((plates.make()?, chars.make()?)),
        |(pb, cb), path| {
            let img = load_rgb(path)?;
            let key = image_id(path);
            let readings = read_plate(&img, &key, pb.as_mut(), cb.as_mut(), &pipeline, &classes)?;
            Ok(ReadingRecord::new(key, &readings))
        },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub split: SplitName,
    pub classes: Option<PathBuf>,
    pub fixed_confidence: f64,
    pub sweep: bool,
    pub truth: Option<PathBuf>,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// Prediction records naming images absent from the split.
    pub unknown_images: Vec<String>,
}

fn dataset_classes(root: &Path, manifest: Option<&Path>) -> Result<ClassMap, CliError> {
    let default = root.join("data.yaml");
    match manifest {
        Some(p) => Ok(load_class_map(p, None)?),
        None if default.is_file() => Ok(load_class_map(&default, None)?),
        None => Ok(ClassMap::plate()),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

fn first_schema(text: &str) -> Result<Option<String>, CliError> {
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("line {}: {e}", i + 1)))?;
        return Ok(Some(
            v.get("schema")
                .and_then(|s| s.as_str())
                .unwrap_or_default()
                .to_string(),
        ));
    }
    Ok(None)
}

enum Predictions {
    Detections(Vec<DetectionRecord>),
    Readings(Vec<ReadingRecord>),
}

fn load_predictions(path: &Path) -> Result<Predictions, CliError> {
    let text = read_text(path)?;
    match first_schema(&text)?.as_deref() {
        None => Ok(Predictions::Detections(Vec::new())),
        Some(DETECTIONS_SCHEMA) => Ok(Predictions::Detections(parse_detection_records(&text)?)),
        Some(READING_SCHEMA) => Ok(Predictions::Readings(parse_reading_records(&text)?)),
        Some(other) => Err(CliError::Config(format!(
            "{}: unsupported schema {other:?}, expected {DETECTIONS_SCHEMA:?} or {READING_SCHEMA:?}",
            path.display()
        ))),
    }
}

/// Score a detections or readings file against a dataset split.
pub fn cmd_eval(
    predictions: &Path,
    dataset: &Path,
    opts: &EvalOptions,
) -> Result<EvalOutcome, CliError> {
    let preds = load_predictions(predictions)?;
    let classes = dataset_classes(dataset, opts.classes.as_deref())?;
    let split = load_split(dataset, opts.split, &classes)?;

    let mut by_image: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    let mut dims: BTreeMap<String, (u32, u32)> = BTreeMap::new();
    let mut push = |image: &str, dets: Vec<Detection>| -> Result<(), CliError> {
        if by_image.insert(image.to_string(), dets).is_some() {
            return Err(CliError::Data(format!(
                "duplicate prediction record for image {image:?}"
            )));
        }
        Ok(())
    };
    let bad = |image: &str, e: String| CliError::Data(format!("image {image:?}: {e}"));
    match &preds {
        Predictions::Detections(records) => {
            for r in records {
                let dets = r
                    .detections
                    .iter()
                    .map(|d| d.to_detection().map_err(|e| bad(&r.image, e)))
                    .collect::<Result<Vec<_>, _>>()?;
                dims.insert(r.image.clone(), (r.width, r.height));
                push(&r.image, dets)?;
            }
        }
        Predictions::Readings(records) => {
            for r in records {
                let dets = r
                    .plates
                    .iter()
                    .map(|p| {
                        let d = plateflow_core::records::DetectionEntry {
                            bbox: p.bbox,
                            class_id: 0,
                            confidence: p.confidence,
                        };
                        d.to_detection().map_err(|e| bad(&r.image, e))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                push(&r.image, dets)?;
            }
        }
    }
    for (image, dets) in &by_image {
        if let Some(d) = dets.iter().find(|d| d.class_id >= classes.len()) {
            return Err(bad(
                image,
                format!(
                    "class id {} outside the {}-class map",
                    d.class_id,
                    classes.len()
                ),
            ));
        }
    }
    for e in &split.entries {
        if let Some(&(w, h)) = dims.get(&e.id) {
            if (w, h) != (e.width, e.height) {
                return Err(bad(
                    &e.id,
                    format!(
                        "record size {w}x{h} differs from image size {}x{}",
                        e.width, e.height
                    ),
                ));
            }
        }
    }
    let known: BTreeSet<&str> = split.entries.iter().map(|e| e.id.as_str()).collect();
    let unknown_images = by_image
        .keys()
        .filter(|k| !known.contains(k.as_str()))
        .cloned()
        .collect();

    let empty = Vec::new();
    let num_classes = classes.len();
    let acc = pool(opts.workers)?.install(|| {
        split
            .entries
            .par_iter()
            .map(|e| {
                let gts: Vec<GtBox> = e
                    .pixel_boxes()
                    .into_iter()
                    .map(|(class_id, bbox)| GtBox { class_id, bbox })
                    .collect();
                let mut acc = EvalAccumulator::coco(num_classes);
                acc.add_image(by_image.get(&e.id).unwrap_or(&empty), &gts)?;
                Ok::<_, MetricsError>(acc)
            })
            .try_reduce(|| EvalAccumulator::coco(num_classes), |a, b| a.merge(b))
    })?;

    let mut report = acc.finish(&classes, opts.fixed_confidence)?;
    if opts.sweep {
        let confs: Vec<f64> = (1..=19).map(|i| i as f64 / 20.0).collect();
        report.sweep = acc.sweep(&confs)?;
    }
    if let Some(truth) = &opts.truth {
        let Predictions::Readings(records) = &preds else {
            return Err(CliError::Config("--truth needs a readings file".into()));
        };
        report.sequence_accuracy = seq_report(records, truth)?.accuracy;
    }
    Ok(EvalOutcome {
        report,
        unknown_images,
    })
}

pub fn cmd_stats(
    dataset: &Path,
    split: SplitName,
    classes: Option<&Path>,
) -> Result<DatasetStats, CliError> {
    let classes = dataset_classes(dataset, classes)?;
    Ok(dataset_stats(&load_split(dataset, split, &classes)?))
}

fn seq_report(records: &[ReadingRecord], truth: &Path) -> Result<SequenceReport, CliError> {
    let truth = parse_truth_csv(&read_text(truth)?)?;
    let (predicted, expected) = align(records, &truth)?;
    Ok(sequence_accuracy(&predicted, &expected))
}

/// Exact-match accuracy of a readings file against a truth CSV.
pub fn cmd_seq_eval(readings: &Path, truth: &Path) -> Result<SequenceReport, CliError> {
    let text = read_text(readings)?;
    let records = match first_schema(&text)?.as_deref() {
        None => Vec::new(),
        Some(READING_SCHEMA) => parse_reading_records(&text)?,
        Some(other) => {
            return Err(CliError::Config(format!(
                "{}: unsupported schema {other:?}, expected {READING_SCHEMA:?}",
                readings.display()
            )))
        }
    };
    seq_report(&records, truth)
}

fn resolve(cli_config: Option<&Path>, flags: Overrides) -> Result<RunConfig, CliError> {
    let file = match cli_config {
        Some(p) => Overrides::load_file(p)?,
        None => Overrides::default(),
    };
    let env = std::env::var_os(FIXTURES_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from);
    RunConfig::resolve(file, flags, env)
}

fn progress(quiet: bool, what: &str, n: usize, start: Instant) {
    if !quiet {
        eprintln!(
            "{what} {n} image(s) in {:.2}s",
            start.elapsed().as_secs_f64()
        );
    }
}

/// Execute a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let quiet = cli.quiet;
    let config = cli.config.as_deref();
    let start = Instant::now();
    match cli.command {
        Command::Detect { input, stage, run } => {
            let cfg = resolve(config, run.overrides())?;
            let stage = match stage {
                StageArg::Plate => Stage::Plate,
                StageArg::Char => Stage::Character,
            };
            let records = cmd_detect(&input, stage, &cfg)?;
            let body = match cfg.format {
                OutputFormat::Json => json_lines(&records),
                OutputFormat::Csv => detections_csv(&records),
            };
            emit(cfg.out.as_deref(), &body)?;
            progress(quiet, "detected", records.len(), start);
        }
        Command::Read { input, run } => {
            let cfg = resolve(config, run.overrides())?;
            let records = cmd_read(&input, &cfg)?;
            let body = match cfg.format {
                OutputFormat::Json => json_lines(&records),
                OutputFormat::Csv => readings_csv(&records),
            };
            emit(cfg.out.as_deref(), &body)?;
            progress(quiet, "read", records.len(), start);
        }
        Command::Eval {
            predictions,
            dataset,
            data,
            sweep,
            truth,
            run,
        } => {
            let cfg = resolve(config, run.overrides())?;
            let opts = EvalOptions {
                split: data.split,
                classes: data.classes,
                fixed_confidence: cfg.conf,
                sweep,
                truth,
                workers: cfg.workers,
            };
            let outcome = cmd_eval(&predictions, &dataset, &opts)?;
            if !quiet {
                if !outcome.unknown_images.is_empty() {
                    eprintln!(
                        "warning: ignored predictions for {} image(s) not in the split",
                        outcome.unknown_images.len()
                    );
                }
                print!("{}", eval_table(&outcome.report));
            }
            if let Some(out) = &cfg.out {
                let body = match cfg.format {
                    OutputFormat::Json => outcome.report.to_json() + "\n",
                    OutputFormat::Csv => outcome.report.to_csv(),
                };
                emit(Some(out), &body)?;
            }
        }
        Command::Stats { dataset, data, run } => {
            let cfg = resolve(config, run.overrides())?;
            let stats = cmd_stats(&dataset, data.split, data.classes.as_deref())?;
            if !quiet {
                print!("{}", stats_text(&stats));
            }
            if let Some(out) = &cfg.out {
                let json = serde_json::to_string_pretty(&stats).expect("stats are finite");
                emit(Some(out), &(json + "\n"))?;
            }
        }
        Command::SeqEval {
            readings,
            truth,
            run,
        } => {
            let cfg = resolve(config, run.overrides())?;
            let report = cmd_seq_eval(&readings, &truth)?;
            if !quiet {
                print!("{}", sequence_text(&report));
            }
            if let Some(out) = &cfg.out {
                let json = serde_json::to_string_pretty(&report).expect("report is finite");
                emit(Some(out), &(json + "\n"))?;
            }
        }
        Command::Config { run } => {
            let cfg = resolve(config, run.overrides())?;
            print!("{}", cfg.echo());
        }
    }
    Ok(())
}
