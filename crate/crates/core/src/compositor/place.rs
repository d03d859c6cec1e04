use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::annotation::{Annotation, BoundingBox};
use super::image::Image;
use super::source::{PatchSource, SourcedPatch};
use crate::error::{Error, Result};
use crate::patch::Patch;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchMode {
    /// One patch for the whole run.
    Single,
    /// One patch per image, shared by every patched box in it.
    #[default]
    MultiShared,
}

/// Which box extent the scale factor refers to. The patch keeps its own
/// aspect ratio in every case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleAnchor {
    /// Patch width = s · box width.
    #[default]
    Width,
    /// Patch height = s · box height.
    Height,
    /// Patch area = s² · box area.
    Area,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementConfig {
    pub pi: f64,
    pub resize_range: [f64; 2],
    /// Degrees; angles are drawn from `[-rotation_max, rotation_max]`.
    pub rotation_max: f64,
    pub mode: PatchMode,
    pub anchor: ScaleAnchor,
    pub seed: u64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            pi: 0.25,
            resize_range: [0.75, 1.0],
            rotation_max: 30.0,
            mode: PatchMode::MultiShared,
            anchor: ScaleAnchor::Width,
            seed: 0,
        }
    }
}

impl PlacementConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.pi) {
            problems.push(format!("pi {} outside [0, 1]", self.pi));
        }
        let [lo, hi] = self.resize_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            problems.push(format!("resize range [{lo}, {hi}] must satisfy 0 < min <= max"));
        }
        if !(self.rotation_max >= 0.0 && self.rotation_max.is_finite()) {
            problems.push(format!("rotation_max {} must be a nonnegative angle", self.rotation_max));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub scale: f64,
    /// Counter-clockwise on screen, in degrees.
    pub theta_deg: f64,
}

pub fn draw_transform(cfg: &PlacementConfig, rng: &mut rng::Rng) -> Transform {
    let [lo, hi] = cfg.resize_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let theta_deg = if cfg.rotation_max > 0.0 {
        rng.random_range(-cfg.rotation_max..=cfg.rotation_max)
    } else {
        0.0
    };
    Transform { scale, theta_deg }
}

/// Pastes `patch` centred on `bbox`, scaled and rotated by `t`, with
/// bilinear resampling. Pixels outside the rotated patch or the image are
/// left alone.
pub fn place_patch(image: &mut Image, bbox: &BoundingBox, patch: &Patch, t: Transform, anchor: ScaleAnchor) {
    let (iw, ih) = (image.width(), image.height());
    let s = patch.shape();
    let (sw, sh) = (s.width as f64, s.height as f64);
    let aspect = sh / sw;
    let bw = bbox.w * iw as f64;
    let bh = bbox.h * ih as f64;
    let pw = match anchor {
        ScaleAnchor::Width => t.scale * bw,
        ScaleAnchor::Height => t.scale * bh / aspect,
        ScaleAnchor::Area => t.scale * (bw * bh / aspect).sqrt(),
    };
    let ph = pw * aspect;
    if !(pw > 0.0 && ph > 0.0) {
        return;
    }
    let cx = bbox.cx * iw as f64;
    let cy = bbox.cy * ih as f64;
    let (sin, cos) = t.theta_deg.to_radians().sin_cos();
    let ex = 0.5 * (pw * cos.abs() + ph * sin.abs());
    let ey = 0.5 * (pw * sin.abs() + ph * cos.abs());
    let x0 = (cx - ex).floor().max(0.0) as usize;
    let y0 = (cy - ey).floor().max(0.0) as usize;
    let x1 = ((cx + ex).ceil().max(0.0) as usize).min(iw);
    let y1 = ((cy + ey).ceil().max(0.0) as usize).min(ih);

    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let a = dx * cos - dy * sin;
            let b = dx * sin + dy * cos;
            let u = a / pw * sw + sw / 2.0;
            let v = b / ph * sh + sh / 2.0;
            if !(0.0..sw).contains(&u) || !(0.0..sh).contains(&v) {
                continue;
            }
            let fx = (u - 0.5).clamp(0.0, sw - 1.0);
            let fy = (v - 0.5).clamp(0.0, sh - 1.0);
            let (px0, py0) = (fx.floor() as usize, fy.floor() as usize);
            let (px1, py1) = ((px0 + 1).min(s.width - 1), (py0 + 1).min(s.height - 1));
            let (tx, ty) = (fx - px0 as f64, fy - py0 as f64);
            for c in 0..3 {
                let p = |yy, xx| f64::from(patch.get(c, yy, xx));
                let top = p(py0, px0) * (1.0 - tx) + p(py0, px1) * tx;
                let bottom = p(py1, px0) * (1.0 - tx) + p(py1, px1) * tx;
                let value = top * (1.0 - ty) + bottom * ty;
                image.set(c, y, x, value.clamp(0.0, 1.0) as f32);
            }
        }
    }
}

/// One line of the placement log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRecord {
    pub image: String,
    #[serde(rename = "box")]
    pub box_index: usize,
    pub patch_id: Option<String>,
    pub s: Option<f64>,
    pub theta: Option<f64>,
    pub patched: bool,
}

/// Patches each box of `annotation` with probability `cfg.pi`. The random
/// stream is derived from the run seed and the image id, so images can be
/// processed in any order.
pub fn patch_image(
    image: &Image,
    annotation: &Annotation,
    source: &dyn PatchSource,
    cfg: &PlacementConfig,
) -> Result<(Image, Vec<PlacementRecord>)> {
    if image.width() != annotation.width || image.height() != annotation.height {
        return Err(Error::shape(format!(
            "{}: image is {}x{}, annotation says {}x{}",
            annotation.image,
            image.width(),
            image.height(),
            annotation.width,
            annotation.height
        )));
    }
    let mut rng = rng::derived(cfg.seed, &annotation.image);
    let mut shared: Option<SourcedPatch> = match cfg.mode {
        PatchMode::Single => Some(source.draw(&mut rng::derived(cfg.seed, "single"))?),
        PatchMode::MultiShared => None,
    };
    let mut out = image.clone();
    let mut log = Vec::with_capacity(annotation.boxes.len());
    for (i, b) in annotation.boxes.iter().enumerate() {
        let patched = rng.random::<f64>() < cfg.pi;
        if !patched {
            log.push(PlacementRecord {
                image: annotation.image.clone(),
                box_index: i,
                patch_id: None,
                s: None,
                theta: None,
                patched: false,
            });
            continue;
        }
        if shared.is_none() {
            shared = Some(source.draw(&mut rng)?);
        }
        let sp = shared.as_ref().unwrap();
        let t = draw_transform(cfg, &mut rng);
        place_patch(&mut out, &b.bbox, &sp.patch, t, cfg.anchor);
        log.push(PlacementRecord {
            image: annotation.image.clone(),
            box_index: i,
            patch_id: Some(sp.id.clone()),
            s: Some(t.scale),
            theta: Some(t.theta_deg),
            patched: true,
        });
    }
    Ok((out, log))
}

/// Re-applies logged placements to a clean image.
pub fn replay(
    image: &Image,
    annotation: &Annotation,
    records: &[PlacementRecord],
    source: &dyn PatchSource,
    anchor: ScaleAnchor,
) -> Result<Image> {
    let mut out = image.clone();
    let mut cache: HashMap<&str, Patch> = HashMap::new();
    for r in records.iter().filter(|r| r.patched && r.image == annotation.image) {
        let (Some(id), Some(s), Some(theta)) = (r.patch_id.as_deref(), r.s, r.theta) else {
            return Err(Error::Format(format!(
                "{} box {}: patched record without patch id, scale or angle",
                r.image, r.box_index
            )));
        };
        let b = annotation
            .boxes
            .get(r.box_index)
            .ok_or_else(|| Error::Format(format!("{}: no box {}", r.image, r.box_index)))?;
        if !cache.contains_key(id) {
            cache.insert(id, source.resolve(id)?);
        }
        place_patch(
            &mut out,
            &b.bbox,
            &cache[id],
            Transform { scale: s, theta_deg: theta },
            anchor,
        );
    }
    Ok(out)
}

pub fn write_placements(path: &Path, records: &[PlacementRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(Error::file(path))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_placements(path: &Path) -> Result<Vec<PlacementRecord>> {
    let r = BufReader::new(File::open(path).map_err(Error::file(path))?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Composites every annotated image from `images/<id>.png` into
/// `out/<id>.png` in parallel and writes `out/placements.jsonl`.
pub fn compose_dataset(
    annotations: &[Annotation],
    images: &Path,
    source: &dyn PatchSource,
    cfg: &PlacementConfig,
    out: &Path,
) -> Result<Vec<PlacementRecord>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(Error::file(out))?;
    let logs = annotations
        .par_iter()
        .map(|a| {
            let img = Image::load(&images.join(format!("{}.png", a.image)))?;
            let (composited, log) = patch_image(&img, a, source, cfg)?;
            composited.save(&out.join(format!("{}.png", a.image)))?;
            Ok(log)
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<PlacementRecord> = logs.into_iter().flatten().collect();
    write_placements(&out.join("placements.jsonl"), &records)?;
    Ok(records)
}
