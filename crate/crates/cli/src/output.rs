//! Rendering and writing of command results.

use std::io::Write;
use std::path::Path;

use plateflow_core::dataset::DatasetStats;
use plateflow_core::metrics::{EvalReport, SequenceReport};
use plateflow_core::records::{to_json_line, DetectionRecord, ReadingRecord};

use crate::CliError;

/// Write `contents` to `path` through a temporary file in the same
/// directory, so readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail = |e: std::io::Error| CliError::Data(format!("cannot write {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(contents).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

/// Send to `out` when given, else stdout.
pub fn emit(out: Option<&Path>, contents: &str) -> Result<(), CliError> {
    match out {
        Some(path) => write_atomic(path, contents.as_bytes()),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(contents.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::Data(format!("cannot write stdout: {e}")))
        }
    }
}

pub fn json_lines<T: serde::Serialize>(records: &[T]) -> String {
    records.iter().map(|r| to_json_line(r) + "\n").collect()
}

fn f6(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn detections_csv(records: &[DetectionRecord]) -> String {
    let mut out = String::from("image,class_id,confidence,x1,y1,x2,y2\n");
    for r in records {
        for d in &r.detections {
            let [x1, y1, x2, y2] = d.bbox;
            out += &format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&r.image),
                d.class_id,
                f6(d.confidence),
                f6(x1),
                f6(y1),
                f6(x2),
                f6(y2)
            );
        }
    }
    out
}

pub fn readings_csv(records: &[ReadingRecord]) -> String {
    let mut out = String::from("image,plate,text,confidence,x1,y1,x2,y2\n");
    for r in records {
        for (k, p) in r.plates.iter().enumerate() {
            let [x1, y1, x2, y2] = p.bbox;
            out += &format!(
                "{},{k},{},{},{},{},{},{}\n",
                csv_field(&r.image),
                csv_field(&p.text),
                f6(p.confidence),
                f6(x1),
                f6(y1),
                f6(x2),
                f6(y2)
            );
        }
    }
    out
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

/// Console table: one `all` row, then one row per class with ground truth
/// or predictions.
pub fn eval_table(r: &EvalReport) -> String {
    let mut rows = vec![[
        "Class".to_string(),
        "Images".into(),
        "Instances".into(),
        "Precision".into(),
        "Recall".into(),
        "mAP50".into(),
        "mAP50-95".into(),
    ]];
    rows.push([
        "all".into(),
        r.images.to_string(),
        r.instances.to_string(),
        cell(r.precision),
        cell(r.recall),
        cell(r.map50),
        cell(r.map50_95),
    ]);
    for c in r
        .classes
        .iter()
        .filter(|c| c.instances > 0 || c.predictions > 0)
    {
        rows.push([
            c.name.clone(),
            r.images.to_string(),
            c.instances.to_string(),
            cell(c.precision),
            cell(c.recall),
            cell(c.ap50),
            cell(c.ap50_95),
        ]);
    }
    let mut widths = [0usize; 7];
    for row in &rows {
        for (w, s) in widths.iter_mut().zip(row) {
            *w = (*w).max(s.chars().count());
        }
    }
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (s, w))| {
                if i == 0 {
                    format!("{s:<w$}")
                } else {
                    format!("{s:>w$}")
                }
            })
            .collect();
        out += line.join("  ").trim_end();
        out.push('\n');
    }
    if r.empty_ground_truth {
        out += "warning: no ground truth boxes; metrics undefined\n";
    }
    if let Some(acc) = r.sequence_accuracy {
        out += &format!("sequence accuracy: {acc:.4}\n");
    }
    if !r.sweep.is_empty() {
        out += "\n  conf  precision  recall     f1\n";
        for p in &r.sweep {
            out += &format!(
                "{:>6.2}  {:>9.3}  {:>6.3}  {:>5.3}\n",
                p.confidence, p.precision, p.recall, p.f1
            );
        }
    }
    out
}

pub fn stats_text(s: &DatasetStats) -> String {
    let mut out = format!(
        "split {}: {} images, {} boxes, {} negatives\n",
        s.split, s.images, s.annotations, s.negatives
    );
    for (name, n) in s.per_class.iter().filter(|(_, n)| *n > 0) {
        out += &format!("  {name:<12} {n}\n");
    }
    let q = |label: &str, q: &plateflow_core::dataset::Quantiles| {
        format!(
            "{label} min {:.4}  p25 {:.4}  median {:.4}  p75 {:.4}  max {:.4}\n",
            q.min, q.p25, q.median, q.p75, q.max
        )
    };
    out += &q("box width ", &s.box_width);
    out += &q("box height", &s.box_height);
    out
}

pub fn sequence_text(r: &SequenceReport) -> String {
    let mut out = match r.accuracy {
        Some(a) => format!("sequence accuracy: {}/{} = {a:.4}\n", r.correct, r.total),
        None => "sequence accuracy: undefined (no ground truth plates)\n".to_string(),
    };
    for m in &r.mismatches {
        out += &format!(
            "  {}: predicted {} truth {:?}\n",
            m.id,
            m.predicted
                .as_deref()
                .map_or("(none)".to_string(), |p| format!("{p:?}")),
            m.truth
        );
    }
    if !r.unmatched_predictions.is_empty() {
        out += &format!(
            "unmatched predictions: {}\n",
            r.unmatched_predictions.join(", ")
        );
    }
    out
}
