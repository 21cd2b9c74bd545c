//! Run configuration: built-in defaults, overridden by a config file,
//! overridden by command-line flags.
//!
//! The config file is flat `key = value` text. Blank lines and lines
//! starting with `#` are ignored; keys use the flag names without the
//! leading dashes (`nms-iou` and `nms_iou` are both accepted). Unknown keys
//! are an error.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use plateflow_core::pipeline::{PipelineConfig, DEFAULT_PAD_RATIO};
use plateflow_core::postprocess::{DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU};

use crate::CliError;

pub const FIXTURES_ENV: &str = "PLATEFLOW_FIXTURES";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Recorded,
    Runtime,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "recorded" => Ok(Self::Recorded),
            "runtime" => Ok(Self::Runtime),
            other => Err(format!("unknown backend {other:?} (recorded|runtime)")),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Recorded => "recorded",
            Self::Runtime => "runtime",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Json,
    Csv,
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown format {other:?} (json|csv)")),
        }
    }
}

/// Settings that may come from flags or the config file. `None` means
/// "not given at this layer".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub backend: Option<BackendKind>,
    pub fixtures: Option<PathBuf>,
    pub plate_model: Option<PathBuf>,
    pub char_model: Option<PathBuf>,
    pub plate_variant: Option<String>,
    pub char_variant: Option<String>,
    pub char_classes: Option<PathBuf>,
    pub conf: Option<f64>,
    pub nms_iou: Option<f64>,
    pub pad: Option<f64>,
    pub rows: Option<bool>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: Option<OutputFormat>,
}

impl Overrides {
    /// Fields set in `other` win.
    pub fn layer(mut self, other: Overrides) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            backend,
            fixtures,
            plate_model,
            char_model,
            plate_variant,
            char_variant,
            char_classes,
            conf,
            nms_iou,
            pad,
            rows,
            workers,
            out,
            format
        );
        self
    }

    pub fn parse_file(text: &str) -> Result<Self, CliError> {
        let mut o = Overrides::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("config line {}: expected `key = value`", i + 1))
            })?;
            let key = key.trim().replace('_', "-");
            let value = value.trim().trim_matches('"');
            if seen.insert(key.clone(), i + 1).is_some() {
                return Err(CliError::Config(format!(
                    "config line {}: duplicate key {key}",
                    i + 1
                )));
            }
            let bad = |e: String| CliError::Config(format!("config line {}: {key}: {e}", i + 1));
            fn num<T: FromStr>(v: &str) -> Result<T, String>
            where
                T::Err: fmt::Display,
            {
                v.parse::<T>().map_err(|e| e.to_string())
            }
            match key.as_str() {
                "backend" => o.backend = Some(value.parse().map_err(bad)?),
                "fixtures" => o.fixtures = Some(PathBuf::from(value)),
                "plate-model" => o.plate_model = Some(PathBuf::from(value)),
                "char-model" => o.char_model = Some(PathBuf::from(value)),
                "plate-variant" => o.plate_variant = Some(value.to_string()),
                "char-variant" => o.char_variant = Some(value.to_string()),
                "char-classes" => o.char_classes = Some(PathBuf::from(value)),
                "conf" => o.conf = Some(num(value).map_err(bad)?),
                "nms-iou" => o.nms_iou = Some(num(value).map_err(bad)?),
                "pad" => o.pad = Some(num(value).map_err(bad)?),
                "rows" => o.rows = Some(num(value).map_err(bad)?),
                "workers" => o.workers = Some(num(value).map_err(bad)?),
                "out" => o.out = Some(PathBuf::from(value)),
                "format" => o.format = Some(value.parse().map_err(bad)?),
                _ => {
                    return Err(CliError::Config(format!(
                        "config line {}: unknown key {key}",
                        i + 1
                    )))
                }
            }
        }
        Ok(o)
    }

    pub fn load_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_file(&text)
    }
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub fixtures: Option<PathBuf>,
    pub plate_model: Option<PathBuf>,
    pub char_model: Option<PathBuf>,
    pub plate_variant: String,
    pub char_variant: String,
    pub char_classes: Option<PathBuf>,
    pub conf: f64,
    pub nms_iou: f64,
    pub pad: f64,
    pub rows: bool,
    pub workers: usize,
    pub out: Option<PathBuf>,
    pub format: OutputFormat,
}

impl RunConfig {
    /// Resolve `defaults <- file <- flags`, with the fixtures environment
    /// variable as a last resort for the fixture directory.
    pub fn resolve(
        file: Overrides,
        flags: Overrides,
        env_fixtures: Option<PathBuf>,
    ) -> Result<Self, CliError> {
        let o = file.layer(flags);
        let cfg = RunConfig {
            backend: o.backend.unwrap_or(BackendKind::Recorded),
            fixtures: o.fixtures.or(env_fixtures),
            plate_model: o.plate_model,
            char_model: o.char_model,
            plate_variant: o.plate_variant.unwrap_or_else(|| "n".into()),
            char_variant: o.char_variant.unwrap_or_else(|| "s".into()),
            char_classes: o.char_classes,
            conf: o.conf.unwrap_or(DEFAULT_CONF_THRESHOLD),
            nms_iou: o.nms_iou.unwrap_or(DEFAULT_NMS_IOU),
            pad: o.pad.unwrap_or(DEFAULT_PAD_RATIO),
            rows: o.rows.unwrap_or(false),
            workers: o.workers.unwrap_or(1),
            out: o.out,
            format: o.format.unwrap_or(OutputFormat::Json),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let unit = |flag: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(CliError::Config(format!(
                    "--{flag} must be in [0, 1], got {v}"
                )))
            }
        };
        unit("conf", self.conf)?;
        unit("nms-iou", self.nms_iou)?;
        if !self.pad.is_finite() || self.pad < 0.0 {
            return Err(CliError::Config(format!(
                "--pad must be non-negative, got {}",
                self.pad
            )));
        }
        if self.workers == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let mut p = PipelineConfig::with_thresholds(self.conf, self.nms_iou);
        p.pad_ratio = self.pad;
        p.multi_row = self.rows;
        p
    }

    /// `key = value` echo of the effective settings, in config-file syntax.
    pub fn echo(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let mut s = String::new();
        s += &format!("backend = {}\n", self.backend);
        s += &format!("fixtures = {}\n", path(&self.fixtures));
        s += &format!("plate-model = {}\n", path(&self.plate_model));
        s += &format!("char-model = {}\n", path(&self.char_model));
        s += &format!("conf = {}\n", self.conf);
        s += &format!("nms-iou = {}\n", self.nms_iou);
        s += &format!("pad = {}\n", self.pad);
        s += &format!("rows = {}\n", self.rows);
        s += &format!("workers = {}\n", self.workers);
        s
    }
}
