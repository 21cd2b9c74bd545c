//! YOLO-format dataset ingestion.
//!
//! A dataset root holds one directory per split, each with `images/` and
//! `labels/` subdirectories whose files share stems:
//!
//! ```text
//! <root>/<split>/images/<stem>.<jpg|jpeg|png|bmp|webp>
//! <root>/<split>/labels/<stem>.txt
//! ```
//!
//! Label lines are `class_id cx cy w h` with normalized coordinates.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{norm_to_pixels, BBox, NormBox};

const IMAGE_EXTENSIONS: [&str; 5] = ["jpg", "jpeg", "png", "bmp", "webp"];

/// Canonical character glyph order: digits then uppercase letters.
pub const CHARACTER_GLYPHS: &str = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";

pub const PLATE_CLASS_NAME: &str = "LP Reg. No.";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: expected 5 fields `class cx cy w h`, found {found}")]
    TokenCount { line: usize, found: usize },
    #[error("line {line}: field `{field}` is not a number: {value:?}")]
    NotNumeric {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: negative class id {value}")]
    NegativeClass { line: usize, value: i64 },
    #[error("line {line}: class id {class_id} outside class map of {num_classes}")]
    ClassOutOfRange {
        line: usize,
        class_id: usize,
        num_classes: usize,
    },
    #[error("line {line}: {field} = {value} is out of range")]
    OutOfRange {
        line: usize,
        field: &'static str,
        value: f64,
    },
    #[error("{path}: {source}")]
    Label {
        path: PathBuf,
        #[source]
        source: Box<DatasetError>,
    },
    #[error("missing directory {0}")]
    MissingDirectory(PathBuf),
    #[error("unreadable image {path}: {message}")]
    UnreadableImage { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("class manifest: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Ordered class names; the index is the class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassMap {
    names: Vec<String>,
}

/// Expected size of a class map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassPreset {
    Plate,
    Character,
}

impl ClassPreset {
    pub fn expected_len(self) -> usize {
        match self {
            ClassPreset::Plate => 1,
            ClassPreset::Character => 36,
        }
    }
}

impl ClassMap {
    pub fn new(names: Vec<String>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for name in &names {
            if name.trim().is_empty() {
                return Err(DatasetError::Manifest("empty class name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(DatasetError::Manifest(format!(
                    "duplicate class name {name:?}"
                )));
            }
        }
        if names.is_empty() {
            return Err(DatasetError::Manifest("no class names".into()));
        }
        Ok(Self { names })
    }

    pub fn plate() -> Self {
        Self {
            names: vec![PLATE_CLASS_NAME.to_string()],
        }
    }

    pub fn characters() -> Self {
        Self {
            names: CHARACTER_GLYPHS.chars().map(String::from).collect(),
        }
    }

    pub fn preset(preset: ClassPreset) -> Self {
        match preset {
            ClassPreset::Plate => Self::plate(),
            ClassPreset::Character => Self::characters(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn check_preset(&self, preset: ClassPreset) -> Result<(), DatasetError> {
        if self.len() != preset.expected_len() {
            return Err(DatasetError::Manifest(format!(
                "expected {} classes for {:?}, found {}",
                preset.expected_len(),
                preset,
                self.len()
            )));
        }
        Ok(())
    }
}

/// Parse a class manifest.
///
/// Accepted grammar: the document is scanned for a top-level `names:` key.
/// Its value is one of
///
/// * a flow list on the same line: `names: [A, 'B', "C"]`
/// * an indented block list of `- name` items
/// * an indented block map of `<id>: name` items; ids must be exactly
///   `0..n` in any order
///
/// Other top-level keys, blank lines and `#` comments are ignored. Names may
/// be wrapped in single or double quotes.
pub fn parse_class_manifest(text: &str) -> Result<ClassMap, DatasetError> {
    let lines: Vec<&str> = text.lines().collect();
    let start = lines
        .iter()
        .position(|l| {
            let l = strip_comment(l);
            !l.starts_with([' ', '\t']) && l.trim_end().starts_with("names:")
        })
        .ok_or_else(|| DatasetError::Manifest("no top-level `names:` key".into()))?;

    let inline = strip_comment(lines[start]).trim_end()["names:".len()..].trim();
    if !inline.is_empty() {
        let inner = inline
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| DatasetError::Manifest(format!("unsupported names value {inline:?}")))?;
        let names = if inner.trim().is_empty() {
            Vec::new()
        } else {
            inner.split(',').map(unquote).collect()
        };
        return ClassMap::new(names);
    }

    let mut listed = Vec::new();
    let mut keyed: BTreeMap<usize, String> = BTreeMap::new();
    for raw in &lines[start + 1..] {
        let line = strip_comment(raw);
        if line.trim().is_empty() {
            continue;
        }
        if !line.starts_with([' ', '\t', '-']) {
            break;
        }
        let item = line.trim();
        if let Some(rest) = item.strip_prefix('-') {
            listed.push(unquote(rest));
        } else if let Some((k, v)) = item.split_once(':') {
            let id: usize = k
                .trim()
                .parse()
                .map_err(|_| DatasetError::Manifest(format!("bad class index {k:?}")))?;
            if keyed.insert(id, unquote(v)).is_some() {
                return Err(DatasetError::Manifest(format!("class index {id} repeated")));
            }
        } else {
            return Err(DatasetError::Manifest(format!(
                "unrecognized line {item:?}"
            )));
        }
    }
    if !listed.is_empty() && !keyed.is_empty() {
        return Err(DatasetError::Manifest("mixed list and map entries".into()));
    }
    if !keyed.is_empty() {
        if keyed.keys().copied().ne(0..keyed.len()) {
            return Err(DatasetError::Manifest("class indices must be 0..n".into()));
        }
        return ClassMap::new(keyed.into_values().collect());
    }
    ClassMap::new(listed)
}

fn strip_comment(line: &str) -> &str {
    let mut quote = None;
    for (i, c) in line.char_indices() {
        match (quote, c) {
            (None, '\'' | '"') => quote = Some(c),
            (Some(q), c) if c == q => quote = None,
            (None, '#') => return &line[..i],
            _ => {}
        }
    }
    line
}

fn unquote(s: &str) -> String {
    let s = s.trim();
    for q in ['\'', '"'] {
        if let Some(inner) = s.strip_prefix(q).and_then(|r| r.strip_suffix(q)) {
            return inner.to_string();
        }
    }
    s.to_string()
}

/// Read and validate a class manifest, optionally against a preset size.
pub fn load_class_map(
    manifest: &Path,
    preset: Option<ClassPreset>,
) -> Result<ClassMap, DatasetError> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let map = parse_class_manifest(&text)?;
    if let Some(p) = preset {
        map.check_preset(p)?;
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthAnnotation {
    pub class_id: usize,
    pub box_: NormBox,
}

impl GroundTruthAnnotation {
    /// Label line with 6-decimal fixed precision.
    pub fn to_label_line(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.6}",
            self.class_id,
            self.box_.cx(),
            self.box_.cy(),
            self.box_.w(),
            self.box_.h()
        )
    }
}

impl fmt::Display for GroundTruthAnnotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_label_line())
    }
}

/// Parse one `class cx cy w h` label line. `line_no` is 1-based and only
/// used for error reporting.
pub fn parse_label_line(text: &str, line_no: usize) -> Result<GroundTruthAnnotation, DatasetError> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() != 5 {
        return Err(DatasetError::TokenCount {
            line: line_no,
            found: tokens.len(),
        });
    }
    let class: i64 = tokens[0].parse().map_err(|_| DatasetError::NotNumeric {
        line: line_no,
        field: "class",
        value: tokens[0].to_string(),
    })?;
    if class < 0 {
        return Err(DatasetError::NegativeClass {
            line: line_no,
            value: class,
        });
    }
    const FIELDS: [&str; 4] = ["cx", "cy", "w", "h"];
    let mut vals = [0.0f64; 4];
    for (i, field) in FIELDS.iter().enumerate() {
        let tok = tokens[i + 1];
        let v: f64 = tok.parse().map_err(|_| DatasetError::NotNumeric {
            line: line_no,
            field,
            value: tok.to_string(),
        })?;
        let ok = if i < 2 {
            (0.0..=1.0).contains(&v)
        } else {
            v > 0.0 && v <= 1.0
        };
        if !ok || !v.is_finite() {
            return Err(DatasetError::OutOfRange {
                line: line_no,
                field,
                value: v,
            });
        }
        vals[i] = v;
    }
    let box_ = NormBox::new(vals[0], vals[1], vals[2], vals[3]).expect("ranges checked above");
    Ok(GroundTruthAnnotation {
        class_id: class as usize,
        box_,
    })
}

/// Parse a whole label file body. Blank lines are skipped.
pub fn parse_label_file(
    text: &str,
    classes: &ClassMap,
) -> Result<Vec<GroundTruthAnnotation>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ann = parse_label_line(line, i + 1)?;
        if ann.class_id >= classes.len() {
            return Err(DatasetError::ClassOutOfRange {
                line: i + 1,
                class_id: ann.class_id,
                num_classes: classes.len(),
            });
        }
        out.push(ann);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" | "val" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split {other:?} (train|valid|test)")),
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    /// File stem, used as the image id throughout the tool.
    pub id: String,
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<GroundTruthAnnotation>,
}

impl DatasetEntry {
    pub fn pixel_boxes(&self) -> Vec<(usize, BBox)> {
        self.annotations
            .iter()
            .map(|a| (a.class_id, norm_to_pixels(&a.box_, self.width, self.height)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub split: SplitName,
    pub classes: ClassMap,
    pub entries: Vec<DatasetEntry>,
}

pub fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Image files directly under `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    if !dir.is_dir() {
        return Err(DatasetError::MissingDirectory(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Load `<root>/<split>`. Images without a label file are negatives.
pub fn load_split(
    root: &Path,
    split: SplitName,
    classes: &ClassMap,
) -> Result<DatasetSplit, DatasetError> {
    let split_dir = root.join(split.as_str());
    let images_dir = split_dir.join("images");
    let labels_dir = split_dir.join("labels");
    if !split_dir.is_dir() {
        return Err(DatasetError::MissingDirectory(split_dir));
    }

    let mut entries = Vec::new();
    for image_path in list_images(&images_dir)? {
        let (width, height) =
            image::image_dimensions(&image_path).map_err(|e| DatasetError::UnreadableImage {
                path: image_path.clone(),
                message: e.to_string(),
            })?;
        let id = image_id(&image_path);
        let label_path = labels_dir.join(format!("{id}.txt"));
        let annotations = if label_path.is_file() {
            let text = fs::read_to_string(&label_path).map_err(io_err(&label_path))?;
            parse_label_file(&text, classes).map_err(|e| DatasetError::Label {
                path: label_path.clone(),
                source: Box::new(e),
            })?
        } else {
            Vec::new()
        };
        entries.push(DatasetEntry {
            id,
            image_path,
            width,
            height,
            annotations,
        });
    }
    Ok(DatasetSplit {
        split,
        classes: classes.clone(),
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Quantiles {
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
}

impl Quantiles {
    /// Linear-interpolated quantiles; all zero for empty input.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            min: v[0],
            p25: q(0.25),
            median: q(0.5),
            p75: q(0.75),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub split: String,
    pub images: usize,
    pub annotations: usize,
    pub negatives: usize,
    /// Annotation count per class id, in class-map order.
    pub per_class: Vec<(String, usize)>,
    /// Normalized box width quantiles.
    pub box_width: Quantiles,
    /// Normalized box height quantiles.
    pub box_height: Quantiles,
}

pub fn dataset_stats(d: &DatasetSplit) -> DatasetStats {
    let mut counts = vec![0usize; d.classes.len()];
    let mut widths = Vec::new();
    let mut heights = Vec::new();
    for e in &d.entries {
        for a in &e.annotations {
            counts[a.class_id] += 1;
            widths.push(a.box_.w());
            heights.push(a.box_.h());
        }
    }
    DatasetStats {
        split: d.split.to_string(),
        images: d.entries.len(),
        annotations: widths.len(),
        negatives: d
            .entries
            .iter()
            .filter(|e| e.annotations.is_empty())
            .count(),
        per_class: d.classes.names().iter().cloned().zip(counts).collect(),
        box_width: Quantiles::of(&widths),
        box_height: Quantiles::of(&heights),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_well_formed_line() {
        let a = parse_label_line("0 0.5 0.5 0.2 0.1", 1).unwrap();
        assert_eq!(a.class_id, 0);
        assert_eq!(a.box_, NormBox::new(0.5, 0.5, 0.2, 0.1).unwrap());
    }

    #[test]
    fn parse_errors_are_distinct() {
        assert!(matches!(
            parse_label_line("1 0.5 0.5 0 0.1", 3),
            Err(DatasetError::OutOfRange {
                line: 3,
                field: "w",
                ..
            })
        ));
        assert!(matches!(
            parse_label_line("0 0.5 0.5 0.2", 7),
            Err(DatasetError::TokenCount { line: 7, found: 4 })
        ));
        assert!(matches!(
            parse_label_line("0 0.5 x 0.2 0.1", 1),
            Err(DatasetError::NotNumeric { field: "cy", .. })
        ));
        assert!(matches!(
            parse_label_line("-1 0.5 0.5 0.2 0.1", 1),
            Err(DatasetError::NegativeClass { value: -1, .. })
        ));
        assert!(matches!(
            parse_label_line("0 1.5 0.5 0.2 0.1", 1),
            Err(DatasetError::OutOfRange { field: "cx", .. })
        ));
        assert!(matches!(
            parse_label_line("0 nan 0.5 0.2 0.1", 1),
            Err(DatasetError::OutOfRange { field: "cx", .. })
        ));
    }

    #[test]
    fn label_file_checks_class_range() {
        let err = parse_label_file(
            "0 0.5 0.5 0.1 0.1\n\n3 0.5 0.5 0.1 0.1\n",
            &ClassMap::plate(),
        );
        assert!(matches!(
            err,
            Err(DatasetError::ClassOutOfRange {
                line: 3,
                class_id: 3,
                ..
            })
        ));
    }

    #[test]
    fn character_preset_order() {
        let m = ClassMap::characters();
        assert_eq!(m.len(), 36);
        assert_eq!(m.name(0), Some("0"));
        assert_eq!(m.name(9), Some("9"));
        assert_eq!(m.name(10), Some("A"));
        assert_eq!(m.name(35), Some("Z"));
        assert!(m.check_preset(ClassPreset::Character).is_ok());
        assert!(m.check_preset(ClassPreset::Plate).is_err());
    }

    #[test]
    fn manifest_forms() {
        let block = "path: ../data\nnames:\n  - '0'\n  - A # letter\n  - \"B\"\nnc: 3\n";
        assert_eq!(
            parse_class_manifest(block).unwrap().names(),
            ["0", "A", "B"]
        );

        let flow = "names: ['LP Reg. No.']\n";
        let m = parse_class_manifest(flow).unwrap();
        assert_eq!(m.names(), ["LP Reg. No."]);
        assert!(m.check_preset(ClassPreset::Plate).is_ok());

        let keyed = "names:\n  1: B\n  0: A\n";
        assert_eq!(parse_class_manifest(keyed).unwrap().names(), ["A", "B"]);

        let top_level_dash = "names:\n- x\n- y\n";
        assert_eq!(
            parse_class_manifest(top_level_dash).unwrap().names(),
            ["x", "y"]
        );
    }

    #[test]
    fn manifest_errors() {
        assert!(parse_class_manifest("names:\n  - A\n  - A\n").is_err());
        assert!(parse_class_manifest("names:\n  - ''\n").is_err());
        assert!(parse_class_manifest("nc: 2\n").is_err());
        assert!(parse_class_manifest("names:\n  0: A\n  2: B\n").is_err());
        assert!(parse_class_manifest("names: A\n").is_err());
    }

    #[test]
    fn full_character_manifest() {
        let body: String = CHARACTER_GLYPHS
            .chars()
            .map(|c| format!("  - '{c}'\n"))
            .collect();
        let m = parse_class_manifest(&format!("names:\n{body}")).unwrap();
        assert_eq!(m, ClassMap::characters());
    }

    #[test]
    fn quantiles() {
        let q = Quantiles::of(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!(
            (q.min, q.p25, q.median, q.p75, q.max),
            (1.0, 2.0, 3.0, 4.0, 5.0)
        );
        assert_eq!(Quantiles::of(&[]), Quantiles::default());
    }

    #[test]
    fn stats_additivity() {
        let ann = |c| GroundTruthAnnotation {
            class_id: c,
            box_: NormBox::new(0.5, 0.5, 0.1, 0.2).unwrap(),
        };
        let entry = |id: &str, anns: Vec<GroundTruthAnnotation>| DatasetEntry {
            id: id.into(),
            image_path: PathBuf::new(),
            width: 10,
            height: 10,
            annotations: anns,
        };
        let split = DatasetSplit {
            split: SplitName::Test,
            classes: ClassMap::characters(),
            entries: vec![
                entry("a", vec![ann(0), ann(1), ann(1)]),
                entry("b", vec![ann(35)]),
            ],
        };
        let s = dataset_stats(&split);
        assert_eq!(s.images, 2);
        assert_eq!(s.annotations, 4);
        assert_eq!(s.per_class.iter().map(|(_, n)| n).sum::<usize>(), 4);
        assert_eq!(s.per_class[1], ("1".to_string(), 2));

        let empty = DatasetSplit {
            split: SplitName::Valid,
            classes: ClassMap::plate(),
            entries: vec![],
        };
        let s = dataset_stats(&empty);
        assert_eq!((s.images, s.annotations, s.negatives), (0, 0, 0));
    }

    proptest! {
        #[test]
        fn label_line_round_trip(class in 0usize..36, cx in 0.0..=1.0f64, cy in 0.0..=1.0f64,
                                 w in 1e-3..=1.0f64, h in 1e-3..=1.0f64) {
            // values already at 6-decimal precision survive formatting exactly
            let r = |v: f64| (v * 1e6).round() / 1e6;
            let ann = GroundTruthAnnotation {
                class_id: class,
                box_: NormBox::new(r(cx), r(cy), r(w), r(h)).unwrap(),
            };
            let back = parse_label_line(&ann.to_label_line(), 1).unwrap();
            prop_assert_eq!(back.class_id, ann.class_id);
            prop_assert!((back.box_.cx() - ann.box_.cx()).abs() < 1e-9);
            prop_assert!((back.box_.cy() - ann.box_.cy()).abs() < 1e-9);
            prop_assert!((back.box_.w() - ann.box_.w()).abs() < 1e-9);
            prop_assert!((back.box_.h() - ann.box_.h()).abs() < 1e-9);
        }
    }
}
