//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use plateflow_cli::{cmd_eval, cmd_read, EvalOptions, Overrides, RunConfig};
use plateflow_core::dataset::{ClassMap, GroundTruthAnnotation, SplitName};
use plateflow_core::geometry::{iou, letterbox_plan_rect, map_box, unmap_box, BBox, NormBox};
use plateflow_core::metrics::{
    bbox_loss, cls_loss, coco_iou_thresholds, map_suite, match_detections, GtBox, LossSample,
};
use plateflow_core::pipeline::{sequence_characters, CharacterObservation};
use plateflow_core::postprocess::{decode, nms, Detection, RawHeadOutput};
use plateflow_core::records::{parse_reading_records, to_json_line};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/recorded")
}

fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

// ---------------------------------------------------------------------------
// Independent oracles

fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Visiting order: confidence descending, then x1, y1, class ascending.
fn oracle_rank(preds: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&i, &j| {
        let (a, b) = (&preds[i], &preds[j]);
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.bbox.x1().partial_cmp(&b.bbox.x1()).unwrap())
            .then(a.bbox.y1().partial_cmp(&b.bbox.y1()).unwrap())
            .then(a.class_id.cmp(&b.class_id))
    });
    idx
}

/// Step replay of greedy matching at one threshold: returns, in visiting
/// order, `(pred index, matched gt index)`.
fn oracle_match(preds: &[Detection], gts: &[GtBox], thr: f64) -> Vec<(usize, Option<usize>)> {
    let mut matched = vec![false; gts.len()];
    let mut steps = Vec::new();
    for i in oracle_rank(preds) {
        let p = &preds[i];
        let mut best_j = None;
        let mut best_v = -1.0;
        for (j, g) in gts.iter().enumerate() {
            if g.class_id != p.class_id || matched[j] {
                continue;
            }
            let v = oracle_iou(p.bbox.to_array(), g.bbox.to_array());
            if v > best_v {
                best_v = v;
                best_j = Some(j);
            }
        }
        let hit = match best_j {
            Some(j) if best_v >= thr => {
                matched[j] = true;
                Some(j)
            }
            _ => None,
        };
        steps.push((i, hit));
    }
    steps
}

/// `(recall, precision)` after each distinct confidence, best first.
fn oracle_points(scored: &[(f64, bool)], num_gt: usize) -> Vec<(f64, f64)> {
    let mut confs: Vec<f64> = scored.iter().map(|s| s.0).collect();
    confs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    confs.dedup();
    confs
        .iter()
        .map(|&c| {
            let tp = scored.iter().filter(|s| s.0 >= c && s.1).count();
            let n = scored.iter().filter(|s| s.0 >= c).count();
            (tp as f64 / num_gt as f64, tp as f64 / n as f64)
        })
        .collect()
}

fn interp(points: &[(f64, f64)], r: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.0 >= r)
        .map(|p| p.1)
        .fold(0.0, f64::max)
}

fn oracle_ap101(scored: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let pts = oracle_points(scored, num_gt);
    Some(
        (0..=100)
            .map(|i| interp(&pts, i as f64 / 100.0))
            .sum::<f64>()
            / 101.0,
    )
}

/// Exact area under the interpolated precision envelope.
fn oracle_ap_all_points(scored: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let pts = oracle_points(scored, num_gt);
    let mut recalls: Vec<f64> = pts.iter().map(|p| p.0).collect();
    recalls.push(0.0);
    recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    recalls.dedup();
    Some(
        recalls
            .windows(2)
            .map(|w| (w[1] - w[0]) * interp(&pts, w[1]))
            .sum(),
    )
}

// ---------------------------------------------------------------------------
// Random instances

type Image = (Vec<Detection>, Vec<GtBox>);

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x1 = rng.random_range(0.0..500.0);
    let y1 = rng.random_range(0.0..500.0);
    bb(
        x1,
        y1,
        x1 + rng.random_range(5.0..120.0),
        y1 + rng.random_range(5.0..120.0),
    )
}

fn random_conf(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random_bool(0.3) {
        rng.random_range(1..=20) as f64 / 20.0
    } else {
        rng.random_range(0.01..1.0)
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> (usize, Vec<Image>) {
    let nc = rng.random_range(1..=5);
    let mut budget = rng.random_range(1..=100usize);
    let mut images = Vec::new();
    for _ in 0..rng.random_range(1..=4) {
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for _ in 0..rng.random_range(0..=10) {
            let g = GtBox {
                class_id: rng.random_range(0..nc),
                bbox: random_box(rng),
            };
            for _ in 0..rng.random_range(0..=2) {
                let j = rng.random_range(0.0..0.35);
                let (w, h) = (g.bbox.width(), g.bbox.height());
                let dx = rng.random_range(-j..=j) * w;
                let dy = rng.random_range(-j..=j) * h;
                let class_id = if rng.random_bool(0.9) {
                    g.class_id
                } else {
                    rng.random_range(0..nc)
                };
                preds.push(Detection {
                    bbox: bb(
                        g.bbox.x1() + dx,
                        g.bbox.y1() + dy,
                        g.bbox.x2() + dx,
                        g.bbox.y2() + dy,
                    ),
                    class_id,
                    confidence: random_conf(rng),
                });
            }
            gts.push(g);
        }
        for _ in 0..rng.random_range(0..=4) {
            preds.push(Detection {
                bbox: random_box(rng),
                class_id: rng.random_range(0..nc),
                confidence: random_conf(rng),
            });
        }
        preds.truncate(budget);
        budget -= preds.len();
        images.push((preds, gts));
    }
    (nc, images)
}

fn class_names(n: usize) -> ClassMap {
    ClassMap::new((0..n).map(|i| format!("class{i}")).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Criteria

fn metric_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
    let thresholds = coco_iou_thresholds();
    let instances = 600;
    let mut max_gap: f64 = 0.0;
    let mut aps = 0usize;
    for n in 0..instances {
        let (nc, images) = random_instance(&mut rng);
        let mut scored: Vec<Vec<Vec<(f64, bool)>>> = vec![vec![Vec::new(); thresholds.len()]; nc];
        let mut gt_counts = vec![0usize; nc];
        for (preds, gts) in &images {
            let m = match_detections(preds, gts, &thresholds, nc).map_err(|e| e.to_string())?;
            let order = oracle_rank(preds);
            check(m.predictions.len() == order.len(), || {
                format!("instance {n}: prediction count")
            })?;
            for (t, &thr) in thresholds.iter().enumerate() {
                let steps = oracle_match(preds, gts, thr);
                for (k, (i, hit)) in steps.iter().enumerate() {
                    let mp = &m.predictions[k];
                    let p = &preds[*i];
                    check(
                        mp.class_id == p.class_id && mp.confidence == p.confidence,
                        || format!("instance {n}: visiting order differs at step {k}"),
                    )?;
                    check(
                        mp.matched_gt[t] == *hit && mp.tp[t] == hit.is_some(),
                        || {
                            format!(
                                "instance {n}: step {k} at IoU {thr}: {:?} vs oracle {hit:?}",
                                mp.matched_gt[t]
                            )
                        },
                    )?;
                    scored[p.class_id][t].push((p.confidence, hit.is_some()));
                }
            }
            for g in gts {
                gt_counts[g.class_id] += 1;
            }
        }

        let report = map_suite(&images, &class_names(nc), 0.25).map_err(|e| e.to_string())?;
        let mut ap50s = Vec::new();
        let mut ap5095s = Vec::new();
        for c in 0..nc {
            let per_t: Vec<Option<f64>> = (0..thresholds.len())
                .map(|t| oracle_ap101(&scored[c][t], gt_counts[c]))
                .collect();
            for t in 0..thresholds.len() {
                if let (Some(ap), Some(all)) =
                    (per_t[t], oracle_ap_all_points(&scored[c][t], gt_counts[c]))
                {
                    max_gap = max_gap.max((ap - all).abs());
                    aps += 1;
                }
            }
            let cm = &report.classes[c];
            let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
                (None, None) => true,
                _ => false,
            };
            let ap5095 = per_t[0]
                .map(|_| per_t.iter().map(|v| v.unwrap()).sum::<f64>() / thresholds.len() as f64);
            check(close(cm.ap50, per_t[0]), || {
                format!(
                    "instance {n} class {c}: AP50 {:?} vs oracle {:?}",
                    cm.ap50, per_t[0]
                )
            })?;
            check(close(cm.ap50_95, ap5095), || {
                format!(
                    "instance {n} class {c}: AP50-95 {:?} vs {:?}",
                    cm.ap50_95, ap5095
                )
            })?;
            ap50s.extend(per_t[0]);
            ap5095s.extend(ap5095);
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let close = |a: Option<f64>, b: Option<f64>| {
            a.zip(b)
                .map_or(a.is_none() && b.is_none(), |(a, b)| (a - b).abs() <= 1e-12)
        };
        check(close(report.map50, mean(&ap50s)), || {
            format!("instance {n}: mAP50")
        })?;
        check(close(report.map50_95, mean(&ap5095s)), || {
            format!("instance {n}: mAP50-95")
        })?;
    }
    let secs = start.elapsed().as_secs_f64();
    check(max_gap <= 0.01, || {
        format!("101-point AP off the all-points oracle by {max_gap:.5}")
    })?;
    check(secs <= 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{instances} instances, {aps} APs, max |AP101 - AP_all| = {max_gap:.5}, matching identical, {secs:.1}s"
    ))
}

fn write_dataset(
    root: &Path,
    rng: &mut ChaCha8Rng,
    images: usize,
    nc: usize,
) -> Vec<(String, u32, u32, Vec<GroundTruthAnnotation>)> {
    let split = root.join("test");
    std::fs::create_dir_all(split.join("images")).unwrap();
    std::fs::create_dir_all(split.join("labels")).unwrap();
    let names: Vec<String> = (0..nc).map(|i| format!("c{i}")).collect();
    std::fs::write(
        root.join("data.yaml"),
        format!("nc: {nc}\nnames: [{}]\n", names.join(", ")),
    )
    .unwrap();
    let mut out = Vec::new();
    for i in 0..images {
        let (w, h) = (rng.random_range(64..400u32), rng.random_range(64..400u32));
        let id = format!("img{i:03}");
        image::RgbImage::new(w, h)
            .save(split.join("images").join(format!("{id}.png")))
            .unwrap();
        let mut anns = Vec::new();
        for _ in 0..rng.random_range(0..6) {
            let bw = rng.random_range(0.05..0.5);
            let bh = rng.random_range(0.05..0.5);
            let cx = rng.random_range(bw / 2.0..1.0 - bw / 2.0);
            let cy = rng.random_range(bh / 2.0..1.0 - bh / 2.0);
            let a = GroundTruthAnnotation {
                class_id: rng.random_range(0..nc),
                box_: NormBox::new(cx, cy, bw, bh).unwrap(),
            };
            anns.push(a);
        }
        let text: String = anns.iter().map(|a| a.to_label_line() + "\n").collect();
        std::fs::write(split.join("labels").join(format!("{id}.txt")), text).unwrap();
        // label files carry six decimals; keep what was written
        let anns = anns
            .iter()
            .map(|a| plateflow_core::dataset::parse_label_line(&a.to_label_line(), 1).unwrap())
            .collect();
        out.push((id, w, h, anns));
    }
    out
}

fn perfect_detector() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut slices = 0;
    for n in 0..200 {
        let (nc, images) = random_instance(&mut rng);
        let as_preds: Vec<Image> = images
            .iter()
            .map(|(_, gts)| {
                let preds = gts
                    .iter()
                    .map(|g| Detection {
                        bbox: g.bbox,
                        class_id: g.class_id,
                        confidence: random_conf(&mut rng),
                    })
                    .collect();
                (preds, gts.clone())
            })
            .collect();
        let r = map_suite(&as_preds, &class_names(nc), 0.25).map_err(|e| e.to_string())?;
        if r.empty_ground_truth {
            continue;
        }
        slices += 1;
        let all = [r.precision, r.recall, r.map50, r.map50_95];
        check(all.iter().all(|v| *v == Some(1.0)), || {
            format!("instance {n}: P/R/mAP50/mAP50-95 = {all:?}")
        })?;
    }

    // through the evaluation command, with detections written to disk
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let nc = 3;
    let data = write_dataset(dir.path(), &mut rng, 12, nc);
    let mut lines = String::new();
    for (id, w, h, anns) in &data {
        let dets: Vec<Detection> = anns
            .iter()
            .map(|a| Detection {
                bbox: plateflow_core::geometry::norm_to_pixels(&a.box_, *w, *h),
                class_id: a.class_id,
                confidence: 0.9,
            })
            .collect();
        lines += &(to_json_line(&plateflow_core::records::DetectionRecord::new(
            id.clone(),
            *w,
            *h,
            &dets,
        )) + "\n");
    }
    let preds = dir.path().join("preds.jsonl");
    std::fs::write(&preds, lines).map_err(|e| e.to_string())?;
    let opts = EvalOptions {
        split: SplitName::Test,
        classes: None,
        fixed_confidence: 0.25,
        sweep: false,
        truth: None,
        workers: 3,
    };
    let r = cmd_eval(&preds, dir.path(), &opts)
        .map_err(|e| e.to_string())?
        .report;
    let all = [r.precision, r.recall, r.map50, r.map50_95];
    check(all.iter().all(|v| *v == Some(1.0)), || {
        format!("cmd_eval on written dataset: {all:?}")
    })?;
    Ok(format!(
        "{slices} random slices and a {}-image dataset via cmd_eval: all exactly 1.0",
        data.len()
    ))
}

fn oracle_nms(dets: &[Detection], thr: f64, class_aware: bool) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in oracle_rank(dets) {
        let d = &dets[i];
        if d.bbox.width() * d.bbox.height() <= 0.0 {
            continue;
        }
        let clash = kept.iter().any(|k| {
            (!class_aware || k.class_id == d.class_id)
                && oracle_iou(k.bbox.to_array(), d.bbox.to_array()) > thr
        });
        if !clash {
            kept.push(*d);
        }
    }
    kept
}

fn random_raw(rng: &mut ChaCha8Rng, anchors: usize, classes: usize) -> RawHeadOutput {
    let mut data = vec![0f32; (4 + classes) * anchors];
    for a in 0..anchors {
        data[a] = rng.random_range(0.0..640.0);
        data[anchors + a] = rng.random_range(0.0..640.0);
        data[2 * anchors + a] = rng.random_range(-5.0..120.0);
        data[3 * anchors + a] = rng.random_range(-5.0..120.0);
        for c in 0..classes {
            data[(4 + c) * anchors + a] = rng.random_range(0.0..=1.0);
        }
    }
    RawHeadOutput::new(4 + classes, anchors, data).unwrap()
}

fn nms_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let cases = 1000;
    let mut kept_total = 0;
    for n in 0..cases {
        let classes = rng.random_range(1..=4);
        let anchors = rng.random_range(1..=120);
        let raw = random_raw(&mut rng, anchors, classes);
        let conf = rng.random_range(0.0..0.9);
        let dets = decode(&raw, conf).map_err(|e| e.to_string())?;
        // decode monotonicity in the confidence threshold
        let higher = decode(&raw, (conf + rng.random_range(0.0..0.1)).min(1.0))
            .map_err(|e| e.to_string())?;
        check(higher.len() <= dets.len(), || {
            format!("case {n}: raising conf added detections")
        })?;

        let thr = rng.random_range(0.1..0.9);
        let class_aware = rng.random_bool(0.5);
        let kept = nms(&dets, thr, class_aware);
        kept_total += kept.len();
        check(kept.iter().all(|k| dets.contains(k)), || {
            format!("case {n}: output not a subset")
        })?;
        check(nms(&kept, thr, class_aware) == kept, || {
            format!("case {n}: not idempotent")
        })?;
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if !class_aware || a.class_id == b.class_id {
                    let v = oracle_iou(a.bbox.to_array(), b.bbox.to_array());
                    check(v <= thr, || {
                        format!("case {n}: kept pair with IoU {v} > {thr}")
                    })?;
                }
            }
        }
        check(
            kept.windows(2).all(|w| w[0].confidence >= w[1].confidence),
            || format!("case {n}: confidences increase in output order"),
        )?;
        check(kept == oracle_nms(&dets, thr, class_aware), || {
            format!("case {n}: differs from greedy oracle")
        })?;
    }
    Ok(format!(
        "{cases} cases, {kept_total} kept detections, zero violations"
    ))
}

const GLYPHS: &[u8] = b"0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";

fn glyph_obs(rng: &mut ChaCha8Rng, cx: f64, cy: f64) -> CharacterObservation {
    let c = rng.random_range(0..GLYPHS.len());
    let (w, h) = (rng.random_range(4.0..20.0), rng.random_range(10.0..30.0));
    CharacterObservation::new(
        (GLYPHS[c] as char).to_string(),
        c,
        bb(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0),
        rng.random_range(0.25..1.0),
    )
}

fn scaled(o: &CharacterObservation, s: f64, dx: f64, dy: f64) -> CharacterObservation {
    let b = o.bbox;
    CharacterObservation::new(
        o.glyph.clone(),
        o.class_id,
        bb(
            b.x1() * s + dx,
            b.y1() * s + dy,
            b.x2() * s + dx,
            b.y2() * s + dy,
        ),
        o.confidence,
    )
}

fn sequencing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let plates = 10_000;
    let mut exact = 0;
    for n in 0..plates {
        let len = rng.random_range(1..=10);
        let mut xs: Vec<f64> = Vec::new();
        while xs.len() < len {
            let x: f64 = rng.random_range(0.0..400.0);
            if xs.iter().all(|&v| v != x) {
                xs.push(x);
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let truth: Vec<CharacterObservation> = xs
            .iter()
            .map(|&x| {
                let y = 50.0 + rng.random_range(-3.0..3.0);
                glyph_obs(&mut rng, x, y)
            })
            .collect();
        let text: String = truth.iter().map(|o| o.glyph.as_str()).collect();
        let mut shuffled = truth.clone();
        shuffled.shuffle(&mut rng);
        let got = sequence_characters(&shuffled, false);
        if got.text == text && got.characters == truth {
            exact += 1;
        }

        let s = rng.random_range(0.1..10.0);
        let (dx, dy) = (
            rng.random_range(-500.0..500.0),
            rng.random_range(-500.0..500.0),
        );
        let moved: Vec<CharacterObservation> =
            shuffled.iter().map(|o| scaled(o, s, dx, dy)).collect();
        let moved_seq = sequence_characters(&moved, false);
        let expect: Vec<CharacterObservation> = got
            .characters
            .iter()
            .map(|o| scaled(o, s, dx, dy))
            .collect();
        check(moved_seq.characters == expect, || {
            format!("plate {n}: order changed under x -> {s}x + {dx}")
        })?;
    }
    check(exact == plates, || {
        format!("{exact}/{plates} plates recovered")
    })?;

    // ties on x: order must not depend on input order
    let mut tie_cases = 0;
    for n in 0..1000 {
        let mut obs: Vec<CharacterObservation> = Vec::new();
        for _ in 0..rng.random_range(2..=8) {
            let x = rng.random_range(0..4) as f64 * 10.0;
            let y = rng.random_range(0..3) as f64 * 5.0;
            let mut o = glyph_obs(&mut rng, x, y);
            if rng.random_bool(0.3) {
                o.confidence = 0.5;
            }
            obs.push(o);
        }
        let first = sequence_characters(&obs, false);
        for _ in 0..5 {
            obs.shuffle(&mut rng);
            check(sequence_characters(&obs, false) == first, || {
                format!("tie case {n}: order depends on input order")
            })?;
        }
        let ok = first.characters.windows(2).all(|w| {
            let (a, b) = (&w[0], &w[1]);
            let key = |o: &CharacterObservation| {
                (o.x_center, o.y_center(), -o.confidence, o.class_id as f64)
            };
            key(a) <= key(b)
        });
        check(ok, || {
            format!("tie case {n}: not ordered by x, y, confidence, class")
        })?;
        tie_cases += 1;
    }
    Ok(format!(
        "{exact}/{plates} permutations recovered, scale/translation invariant, {tie_cases} tie cases deterministic"
    ))
}

fn geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(314);
    let n = 10_000;
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        check(ab == ba, || format!("pair {k}: IoU not symmetric"))?;
        check((0.0..=1.0).contains(&ab), || {
            format!("pair {k}: IoU {ab} out of range")
        })?;
        check((iou(&a, &a) - 1.0).abs() <= 1e-12, || {
            format!("pair {k}: IoU(a, a) = {}", iou(&a, &a))
        })?;
        check(
            (ab - oracle_iou(a.to_array(), b.to_array())).abs() <= 1e-12,
            || format!("pair {k}: IoU formula"),
        )?;

        let (sw, sh) = (rng.random_range(1..4000u32), rng.random_range(1..4000u32));
        let (dw, dh) = (rng.random_range(32..1280u32), rng.random_range(32..1280u32));
        let t = letterbox_plan_rect(sw, sh, dw, dh).map_err(|e| e.to_string())?;
        let x1 = rng.random_range(0.0..sw as f64);
        let y1 = rng.random_range(0.0..sh as f64);
        let src = bb(
            x1,
            y1,
            rng.random_range(x1..=sw as f64),
            rng.random_range(y1..=sh as f64),
        );
        let back = unmap_box(&map_box(&src, &t), &t);
        for (p, q) in src.to_array().iter().zip(back.to_array()) {
            worst = worst.max((p - q).abs());
        }
        let (mx, my) = t.map_point(src.x1(), src.y1());
        let expect = (src.x1() * t.scale + t.pad_x, src.y1() * t.scale + t.pad_y);
        check(
            (mx - expect.0).abs() <= 1e-9 && (my - expect.1).abs() <= 1e-9,
            || format!("case {k}: forward map"),
        )?;
    }
    check(worst <= 1e-6, || {
        format!("letterbox round trip error {worst:e} px")
    })?;
    Ok(format!(
        "{n} box pairs and transforms, max round-trip error {worst:.2e} px"
    ))
}

fn loss_diagnostics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    let n = 1000;
    let (mut worst_cls, mut worst_box): (f64, f64) = (0.0, 0.0);
    for k in 0..n {
        let classes = rng.random_range(2..=40);
        let logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-8.0..8.0)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let probs: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let hot = rng.random_range(0..classes);
        let truth: Vec<f64> = (0..classes)
            .map(|i| if i == hot { 1.0 } else { 0.0 })
            .collect();
        let coords: Vec<f64> = (0..4).map(|_| rng.random_range(-100.0..100.0)).collect();
        let predicted: Vec<f64> = (0..4).map(|_| rng.random_range(-100.0..100.0)).collect();

        let mut ce = 0.0;
        for i in 0..classes {
            ce += -(truth[i] * probs[i].ln());
        }
        let mut se = 0.0;
        for i in 0..4 {
            let d = coords[i] - predicted[i];
            se += d * d;
        }
        let s = LossSample {
            truth,
            probs,
            coords,
            predicted_coords: predicted,
        };
        let cls = cls_loss(&s).map_err(|e| format!("sample {k}: {e}"))?;
        let bx = bbox_loss(&s).map_err(|e| format!("sample {k}: {e}"))?;
        worst_cls = worst_cls.max((cls - ce).abs());
        worst_box = worst_box.max((bx - se).abs() / se.max(1.0));
    }
    check(worst_cls <= 1e-12, || {
        format!("cls loss off by {worst_cls:e}")
    })?;
    check(worst_box <= 1e-12, || {
        format!("bbox loss off by {worst_box:e}")
    })?;

    let sample = |truth: Vec<f64>, probs: Vec<f64>, c: Vec<f64>, p: Vec<f64>| LossSample {
        truth,
        probs,
        coords: c,
        predicted_coords: p,
    };
    let certain = sample(
        vec![0., 1., 0.],
        vec![0., 1., 0.],
        vec![1., 2., 3., 4.],
        vec![1., 2., 3., 4.],
    );
    let even = sample(
        vec![1., 0.],
        vec![0.5, 0.5],
        vec![1., 2., 3., 4.],
        vec![2., 1., 4., 3.],
    );
    let anchors = [
        cls_loss(&certain).unwrap() == 0.0,
        bbox_loss(&certain).unwrap() == 0.0,
        cls_loss(&even).unwrap() == std::f64::consts::LN_2,
        bbox_loss(&even).unwrap() == 4.0,
    ];
    check(anchors.iter().all(|&a| a), || {
        format!("analytic anchors {anchors:?}")
    })?;
    Ok(format!(
        "{n} samples, max cls error {worst_cls:.1e}, max relative bbox error {worst_box:.1e}; anchors 0, ln 2, 4.0 exact"
    ))
}

fn recorded_end_to_end() -> Outcome {
    let dir = fixtures();
    let reference: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("reference.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let want = reference["readings"]
        .as_object()
        .ok_or("reference has no readings")?;

    let config = |workers: usize| {
        RunConfig::resolve(
            Overrides::default(),
            Overrides {
                fixtures: Some(dir.clone()),
                workers: Some(workers),
                ..Default::default()
            },
            None,
        )
    };
    let cfg = config(1).map_err(|e| e.to_string())?;
    let records = cmd_read(&dir.join("images"), &cfg).map_err(|e| e.to_string())?;
    let parallel = cmd_read(&dir.join("images"), &config(4).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let lines = |r: &[plateflow_core::records::ReadingRecord]| {
        r.iter().map(to_json_line).collect::<Vec<_>>()
    };
    check(lines(&records) == lines(&parallel), || {
        "output differs between 1 and 4 workers".into()
    })?;

    // compare the serialized form, as written to disk
    let text: String = lines(&records).join("\n");
    let parsed = parse_reading_records(&text).map_err(|e| e.to_string())?;
    check(parsed.len() == want.len(), || {
        format!("{} records, reference has {}", parsed.len(), want.len())
    })?;

    let floats = |v: &Value| -> Vec<f64> {
        v.as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect()
    };
    let mut worst: f64 = 0.0;
    let mut strings = BTreeMap::new();
    for rec in &parsed {
        let plates = want[&rec.image]
            .as_array()
            .ok_or(format!("{} missing from reference", rec.image))?;
        check(plates.len() == rec.plates.len(), || {
            format!("{}: plate count", rec.image)
        })?;
        for (got, exp) in rec.plates.iter().zip(plates) {
            let text = exp["text"].as_str().unwrap();
            check(got.text == text, || {
                format!("{}: read {:?}, reference {:?}", rec.image, got.text, text)
            })?;
            strings.insert(format!("{}:{}", rec.image, got.text), ());
            for (a, b) in got.bbox.iter().zip(floats(&exp["box"])) {
                worst = worst.max((a - b).abs());
            }
            let chars = exp["characters"].as_array().unwrap();
            check(chars.len() == got.characters.len(), || {
                format!("{}: glyph count", rec.image)
            })?;
            for (c, e) in got.characters.iter().zip(chars) {
                check(c.glyph == e["glyph"].as_str().unwrap(), || {
                    format!("{}: glyph order", rec.image)
                })?;
                for (a, b) in c.bbox.iter().zip(floats(&e["box"])) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    check(worst <= 1e-4, || format!("box error {worst:e}"))?;
    Ok(format!(
        "{} images, {} plate strings exact, max box error {worst:.1e} px, identical across worker counts",
        parsed.len(),
        strings.len()
    ))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("metric-oracle-equivalence", metric_oracle_equivalence),
        ("perfect-detector-identity", perfect_detector),
        ("nms-invariants", nms_invariants),
        ("sequencing-properties", sequencing),
        ("geometry", geometry),
        ("loss-diagnostics", loss_diagnostics),
        ("recorded-backend-end-to-end", recorded_end_to_end),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.2}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{secs:.2}s]");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
