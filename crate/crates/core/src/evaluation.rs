//! Single-class average precision and attack-evaluation reports.
//!
//! Detections are matched greedily in descending score order: each one
//! claims the unclaimed ground-truth box of the same image with the highest
//! IoU at or above the threshold, otherwise it counts as a false positive.
//! The precision envelope is sampled at 101 recall points by default.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compositor::{patch_image, Annotation, FixedPatch, Image, PlacementConfig, SourcedPatch};
use crate::detector::{DetectRequest, Detector, PERSON};
use crate::error::{Error, Result};

/// Absolute pixel corners `[x1, y1, x2, y2]`.
pub type PixelBox = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: String,
    pub bbox: PixelBox,
    pub score: f64,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: String,
    pub bbox: PixelBox,
}

pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let area = |r: &PixelBox| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let (aa, ab) = (area(a), area(b));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / (aa + ab - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    #[default]
    #[serde(rename = "101-point")]
    Point101,
    #[serde(rename = "11-point")]
    Point11,
}

impl Interpolation {
    fn recall_points(self) -> Vec<f64> {
        let steps = match self {
            Self::Point101 => 100,
            Self::Point11 => 10,
        };
        (0..=steps).map(|i| i as f64 / steps as f64).collect()
    }
}

/// True-positive flags for `detections` in descending score order. Ties keep
/// input order.
fn match_detections(detections: &[Detection], ground_truth: &[GroundTruth], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| detections[j].score.total_cmp(&detections[i].score));
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in ground_truth.iter().enumerate() {
        by_image.entry(g.image.as_str()).or_default().push(i);
    }
    let mut claimed = vec![false; ground_truth.len()];
    order
        .iter()
        .map(|&d| {
            let det = &detections[d];
            let mut best: Option<(usize, f64)> = None;
            for &g in by_image.get(det.image.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
                if claimed[g] {
                    continue;
                }
                let v = iou(&det.bbox, &ground_truth[g].bbox);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    claimed[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Interpolated precision averaged over fixed recall points.
pub fn average_precision_with(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    threshold: f64,
    interpolation: Interpolation,
) -> f64 {
    if ground_truth.is_empty() {
        return if detections.is_empty() { 1.0 } else { 0.0 };
    }
    let tp = match_detections(detections, ground_truth, threshold);
    let n_gt = ground_truth.len() as f64;
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0usize, 0usize);
    for hit in tp {
        if hit {
            t += 1;
        } else {
            f += 1;
        }
        recall.push(t as f64 / n_gt);
        precision.push(t as f64 / (t + f) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let points = interpolation.recall_points();
    let total: f64 = points
        .iter()
        .map(|&r| {
            let k = recall.partition_point(|&x| x < r);
            precision.get(k).copied().unwrap_or(0.0)
        })
        .sum();
    total / points.len() as f64
}

pub fn average_precision(detections: &[Detection], ground_truth: &[GroundTruth], threshold: f64) -> f64 {
    average_precision_with(detections, ground_truth, threshold, Interpolation::Point101)
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// `(mAP@0.5, mAP@[0.5:0.95])`.
pub fn map_range(detections: &[Detection], ground_truth: &[GroundTruth], interpolation: Interpolation) -> (f64, f64) {
    let aps: Vec<f64> = coco_thresholds()
        .iter()
        .map(|&t| average_precision_with(detections, ground_truth, t, interpolation))
        .collect();
    (aps[0], aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Mean with sample standard deviation; the deviation is absent for a
/// single value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    #[serde(default)]
    pub std: Option<f64>,
}

impl Stat {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("statistics of an empty sample"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Ok(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub mode: String,
    pub n: usize,
    pub map50: Stat,
    pub map5095: Stat,
}

impl EvalRow {
    pub fn from_runs(mode: impl Into<String>, runs: &[(f64, f64)]) -> Result<Self> {
        let a: Vec<f64> = runs.iter().map(|r| r.0).collect();
        let b: Vec<f64> = runs.iter().map(|r| r.1).collect();
        Ok(Self {
            mode: mode.into(),
            n: runs.len(),
            map50: Stat::from_values(&a)?,
            map5095: Stat::from_values(&b)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default)]
    pub interpolation: Interpolation,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        let report: Self = serde_json::from_str(&text)?;
        if report.rows.is_empty() {
            return Err(Error::invalid(format!("{}: report has no rows", path.display())));
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(Error::file(path))
    }
}

/// Rounds half away from zero at `places` decimals, working on the shortest
/// decimal representation so that `0.695` becomes `0.70`.
pub fn round_half_up(v: f64, places: usize) -> String {
    let repr = format!("{}", v.abs());
    let (int, frac) = repr.split_once('.').unwrap_or((&repr, ""));
    let mut digits: Vec<u8> = int.bytes().chain(frac.bytes().chain(std::iter::repeat(b'0')).take(places)).collect();
    if frac.as_bytes().get(places).is_some_and(|&d| d >= b'5') {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, b'1');
                break;
            }
            i -= 1;
            if digits[i] == b'9' {
                digits[i] = b'0';
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - places;
    let mut out = String::new();
    if v.is_sign_negative() && digits.iter().any(|&d| d != b'0') {
        out.push('-');
    }
    out.push_str(std::str::from_utf8(&digits[..split]).unwrap());
    if places > 0 {
        out.push('.');
        out.push_str(std::str::from_utf8(&digits[split..]).unwrap());
    }
    out
}

fn fmt_stat(s: &Stat, pm: &str) -> String {
    match s.std {
        Some(sd) => format!("{}{pm}{}", round_half_up(s.mean, 2), round_half_up(sd, 2)),
        None => round_half_up(s.mean, 2),
    }
}

pub const REPORT_COLUMNS: [&str; 4] = ["Patch Mode", "n", "mAP 0.5", "mAP 0.5:0.95"];

/// Plain-text table, one `|`-separated line per row under a header.
pub fn format_report(rows: &[EvalRow]) -> Result<String> {
    format_with(rows, " | ", "", "±")
}

/// The same table as LaTeX rows.
pub fn format_latex(rows: &[EvalRow]) -> Result<String> {
    format_with(rows, " & ", " \\\\", "$\\pm$")
}

fn format_with(rows: &[EvalRow], sep: &str, end: &str, pm: &str) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("report has no rows"));
    }
    let mut out = String::new();
    writeln!(out, "{}{end}", REPORT_COLUMNS.join(sep)).unwrap();
    for r in rows {
        let cells = [r.mode.clone(), r.n.to_string(), fmt_stat(&r.map50, pm), fmt_stat(&r.map5095, pm)];
        writeln!(out, "{}{end}", cells.join(sep)).unwrap();
    }
    Ok(out)
}

/// Full-precision CSV; empty std cells mean a single run.
pub fn report_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("mode,n,map50_mean,map50_std,map5095_mean,map5095_std\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mode = if r.mode.contains([',', '"']) {
            format!("\"{}\"", r.mode.replace('"', "\"\""))
        } else {
            r.mode.clone()
        };
        writeln!(
            out,
            "{mode},{},{},{},{},{}",
            r.n,
            r.map50.mean,
            opt(r.map50.std),
            r.map5095.mean,
            opt(r.map5095.std)
        )
        .unwrap();
    }
    out
}

pub fn ground_truth_of(annotations: &[Annotation]) -> Vec<GroundTruth> {
    annotations
        .iter()
        .flat_map(|a| {
            a.boxes.iter().map(|b| GroundTruth {
                image: a.image.clone(),
                bbox: b.bbox.to_pixels(a.width, a.height),
            })
        })
        .collect()
}

/// Patch id used for unpatched images.
pub const CLEAN_ID: &str = "none";

fn detect_all(
    images: &[(String, Image)],
    patch_id: &str,
    detector: &dyn Detector,
) -> Result<Vec<Detection>> {
    let results: Vec<Result<Vec<Detection>>> = images
        .par_iter()
        .map(|(id, img)| {
            detector.detect(&DetectRequest {
                image_id: id,
                patch_id,
                image: img,
            })
        })
        .collect();
    let total = results.len();
    let failures: Vec<&Error> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    if let Some(first) = failures.first() {
        let msg = format!(
            "{} of {total} detector requests failed for patch {patch_id}; completed ones are cached: {first}",
            failures.len()
        );
        return Err(match first {
            Error::DetectorUnreachable(_) => Error::DetectorUnreachable(msg),
            Error::Protocol(_) => Error::Protocol(msg),
            _ => Error::invalid(msg),
        });
    }
    Ok(results
        .into_iter()
        .flat_map(|r| r.unwrap())
        .filter(|d| d.class == PERSON)
        .collect())
}

fn load_images(annotations: &[Annotation], images: &Path) -> Result<Vec<(String, Image)>> {
    annotations
        .par_iter()
        .map(|a| Ok((a.image.clone(), Image::load(&images.join(format!("{}.png", a.image)))?)))
        .collect()
}

/// mAP of the images as they are (a single run).
pub fn evaluate_clean(
    mode: &str,
    annotations: &[Annotation],
    images: &Path,
    detector: &dyn Detector,
    interpolation: Interpolation,
) -> Result<EvalRow> {
    let imgs = load_images(annotations, images)?;
    let dets = detect_all(&imgs, CLEAN_ID, detector)?;
    EvalRow::from_runs(mode, &[map_range(&dets, &ground_truth_of(annotations), interpolation)])
}

/// Composites each patch onto every image and reports mAP mean ± std over
/// the patches. Every box is patched: `cfg.pi` is overridden with 1.
pub fn attack_eval(
    mode: &str,
    patches: &[SourcedPatch],
    annotations: &[Annotation],
    images: &Path,
    detector: &dyn Detector,
    cfg: &PlacementConfig,
    interpolation: Interpolation,
) -> Result<(EvalRow, Vec<(f64, f64)>)> {
    if patches.is_empty() {
        return Err(Error::EmptyPatchSet);
    }
    let cfg = PlacementConfig { pi: 1.0, ..cfg.clone() };
    cfg.validate()?;
    let clean = load_images(annotations, images)?;
    let gt = ground_truth_of(annotations);
    let mut runs = Vec::with_capacity(patches.len());
    for sp in patches {
        let source = FixedPatch {
            id: sp.id.clone(),
            patch: sp.patch.clone(),
        };
        let composited = clean
            .par_iter()
            .zip(annotations)
            .map(|((id, img), a)| Ok((id.clone(), patch_image(img, a, &source, &cfg)?.0)))
            .collect::<Result<Vec<_>>>()?;
        let dets = detect_all(&composited, &sp.id, detector)?;
        let run = map_range(&dets, &gt, interpolation);
        log::info!("{mode} {}: mAP@0.5 {:.4}, mAP@0.5:0.95 {:.4}", sp.id, run.0, run.1);
        runs.push(run);
    }
    Ok((EvalRow::from_runs(mode, &runs)?, runs))
}
