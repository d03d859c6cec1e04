//! Patch tensors, labelled patch sets and their on-disk formats.

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageBuffer, Rgb, RgbImage};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor_file::{self, TensorRecord};

pub const CHANNELS: usize = 3;

/// Default patch geometry, 3×64×64.
pub const DEFAULT_SHAPE: PatchShape = PatchShape {
    channels: CHANNELS,
    height: 64,
    width: 64,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchShape {
    pub const fn new(height: usize, width: usize) -> Self {
        Self {
            channels: CHANNELS,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    fn validate(&self) -> Result<()> {
        if self.channels != CHANNELS {
            return Err(Error::shape(format!(
                "patches have {CHANNELS} channels, got {}",
                self.channels
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::shape(format!(
                "patch must be at least 1x1, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

impl fmt::Display for PatchShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A C×H×W intensity tensor with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    shape: PatchShape,
    data: Vec<f32>,
}

impl Patch {
    pub fn new(shape: PatchShape, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "patch {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if let Some(i) = data
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::invalid(format!(
                "patch value {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn constant(shape: PatchShape, value: f32) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    /// Builds a patch from arbitrary reals, clamping into `[0, 1]`.
    /// Non-finite inputs map to 0.
    pub fn from_clamped<I>(shape: PatchShape, values: I) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: Into<f64>,
    {
        let data: Vec<f32> = values
            .into_iter()
            .map(|v| {
                let v: f64 = v.into();
                if v.is_finite() {
                    v.clamp(0.0, 1.0) as f32
                } else {
                    0.0
                }
            })
            .collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> PatchShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    pub fn mse(&self, other: &Patch) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{} vs {}", self.shape, other.shape)));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = f64::from(*a) - f64::from(*b);
                d * d
            })
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let shape = PatchShape::new(h as usize, w as usize);
        let plane = shape.plane();
        let mut data = vec![0.0f32; shape.len()];
        for (x, y, px) in img.enumerate_pixels() {
            let i = y as usize * shape.width + x as usize;
            for c in 0..CHANNELS {
                data[c * plane + i] = f32::from(px[c]) / 255.0;
            }
        }
        Self::new(shape, data)
    }

    /// Quantises each value with `round(v·255)`.
    pub fn to_rgb8(&self) -> RgbImage {
        let s = self.shape;
        let plane = s.plane();
        ImageBuffer::from_fn(s.width as u32, s.height as u32, |x, y| {
            let i = y as usize * s.width + x as usize;
            Rgb([0, 1, 2].map(|c| quantize(self.data[c * plane + i])))
        })
    }
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Patch-generation parameter groups A–E.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroupId {
    A,
    B,
    C,
    D,
    E,
}

impl ParamGroupId {
    pub const ALL: [ParamGroupId; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        ["A", "B", "C", "D", "E"][self.index()]
    }
}

impl fmt::Display for ParamGroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroupId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            "D" => Ok(Self::D),
            "E" => Ok(Self::E),
            other => Err(Error::invalid(format!(
                "parameter group {other:?} not in {{A,B,C,D,E}}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheduler {
    StepLR,
    CosineAnnealingLR,
}

/// Hyperparameters a prime patch was optimised with. Metadata only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub id: ParamGroupId,
    pub epochs: u32,
    pub scheduler: Scheduler,
    pub resize_range: (f64, f64),
    pub rotation_max: f64,
}

impl ParamGroup {
    pub fn canonical(id: ParamGroupId) -> Self {
        use ParamGroupId::*;
        use Scheduler::*;
        let (epochs, scheduler, resize_range, rotation_max) = match id {
            A => (125, StepLR, (0.5, 0.75), 45.0),
            B => (100, StepLR, (0.75, 1.0), 45.0),
            C => (100, CosineAnnealingLR, (0.75, 1.0), 30.0),
            D => (125, StepLR, (0.5, 0.75), 30.0),
            E => (100, StepLR, (0.75, 1.0), 30.0),
        };
        Self {
            id,
            epochs,
            scheduler,
            resize_range,
            rotation_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.resize_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!(
                "group {} resize range [{lo}, {hi}] must satisfy 0 < min <= max <= 1",
                self.id
            )));
        }
        Ok(())
    }
}

/// An ordered, immutable collection of same-shaped patches with optional
/// parameter-group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    shape: PatchShape,
    patches: Vec<Patch>,
    labels: Vec<Option<ParamGroupId>>,
}

impl PatchSet {
    pub fn new(patches: Vec<Patch>, labels: Vec<Option<ParamGroupId>>) -> Result<Self> {
        let first = patches.first().ok_or(Error::EmptyPatchSet)?;
        let shape = first.shape();
        if labels.len() != patches.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} patches",
                labels.len(),
                patches.len()
            )));
        }
        if let Some((i, p)) = patches.iter().enumerate().find(|(_, p)| p.shape() != shape) {
            return Err(Error::shape(format!(
                "patch {i} has shape {}, expected {shape}",
                p.shape()
            )));
        }
        Ok(Self {
            shape,
            patches,
            labels,
        })
    }

    pub fn unlabeled(patches: Vec<Patch>) -> Result<Self> {
        let labels = vec![None; patches.len()];
        Self::new(patches, labels)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn shape(&self) -> PatchShape {
        self.shape
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn labels(&self) -> &[Option<ParamGroupId>] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> Option<(&Patch, Option<ParamGroupId>)> {
        self.patches.get(i).map(|p| (p, self.labels[i]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Patch, Option<ParamGroupId>)> {
        self.patches.iter().zip(self.labels.iter().copied())
    }

    /// Labels, failing if any patch is unlabelled.
    pub fn require_labels(&self) -> Result<Vec<ParamGroupId>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.ok_or_else(|| Error::invalid(format!("patch {i} has no parameter group")))
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let patches = indices.iter().map(|&i| self.patches[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(patches, labels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchFormat {
    Png8,
    TensorF32,
}

impl PatchFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Png8 => "png",
            Self::TensorF32 => "ptf",
        }
    }

    fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("png") => Ok(Self::Png8),
            Some(e) if e.eq_ignore_ascii_case("ptf") => Ok(Self::TensorF32),
            _ => Err(Error::Format(format!(
                "{}: patch files must be .png or .ptf",
                path.display()
            ))),
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(Error::file(path))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = File::create(path).map_err(Error::file(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, entries)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

/// Loads the patches a manifest lists, resolving file names against
/// `directory`.
pub fn load_patch_set(directory: &Path, manifest: &Path) -> Result<PatchSet> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::EmptyPatchSet);
    }
    let mut patches = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    for entry in &entries {
        let label = entry
            .group
            .as_deref()
            .map(ParamGroupId::from_str)
            .transpose()?;
        let path = directory.join(&entry.file);
        if !path.is_file() {
            return Err(Error::File {
                path,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest"),
            });
        }
        patches.push(load_patch(&path)?);
        labels.push(label);
    }
    PatchSet::new(patches, labels)
}

pub fn load_patch(path: &Path) -> Result<Patch> {
    match PatchFormat::from_path(path)? {
        PatchFormat::Png8 => {
            let img = image::open(path)?.to_rgb8();
            Patch::from_rgb8(&img)
        }
        PatchFormat::TensorF32 => {
            let mut records = tensor_file::load_records(path)?;
            if records.len() != 1 {
                return Err(Error::Format(format!(
                    "{}: expected one tensor record, found {}",
                    path.display(),
                    records.len()
                )));
            }
            let TensorRecord { dims, data } = records.remove(0);
            let shape = PatchShape {
                channels: dims[0],
                height: dims[1],
                width: dims[2],
            };
            Patch::new(shape, data)
        }
    }
}

pub fn save_patch(patch: &Patch, path: &Path, format: PatchFormat) -> Result<()> {
    match format {
        PatchFormat::Png8 => {
            patch
                .to_rgb8()
                .save_with_format(path, image::ImageFormat::Png)?;
        }
        PatchFormat::TensorF32 => {
            let s = patch.shape();
            let rec = TensorRecord::new([s.channels, s.height, s.width], patch.data().to_vec())?;
            tensor_file::save_records(path, &[rec])?;
        }
    }
    Ok(())
}

/// Writes every patch as `{prefix}_{index:04}.{ext}` plus `manifest.json`.
pub fn save_patch_set(
    set: &PatchSet,
    directory: &Path,
    prefix: &str,
    format: PatchFormat,
) -> Result<PathBuf> {
    fs::create_dir_all(directory).map_err(Error::file(directory))?;
    let mut entries = Vec::with_capacity(set.len());
    for (i, (patch, label)) in set.iter().enumerate() {
        let file = format!("{prefix}_{i:04}.{}", format.extension());
        save_patch(patch, &directory.join(&file), format)?;
        entries.push(ManifestEntry {
            file,
            group: label.map(|g| g.to_string()),
        });
    }
    let manifest = directory.join("manifest.json");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// `levels` spatially constant gray patches at `i / (levels - 1)`.
pub fn make_grayscale_patches(levels: usize, shape: PatchShape) -> Result<PatchSet> {
    if levels < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 gray levels, got {levels}"
        )));
    }
    let patches = (0..levels)
        .map(|i| Patch::constant(shape, (i as f64 / (levels - 1) as f64) as f32))
        .collect::<Result<Vec<_>>>()?;
    PatchSet::unlabeled(patches)
}

/// Patches of i.i.d. uniform pixels.
pub fn make_noise_patches(count: usize, shape: PatchShape, seed: u64) -> Result<PatchSet> {
    if count < 1 {
        return Err(Error::invalid("noise patch count must be at least 1"));
    }
    shape.validate()?;
    let mut rng = rng::seeded(seed);
    let patches = (0..count)
        .map(|_| {
            let data = (0..shape.len()).map(|_| rng.random::<f32>()).collect();
            Patch::new(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    PatchSet::unlabeled(patches)
}

/// Deterministic stand-in for a prime patch set: `per_group` patches for
/// each of the five groups.
///
/// Every group owns a smooth base texture and two smooth variation fields;
/// patch `i` is `base + a·v1 + b·v2 + noise` with `a, b ~ N(0, 1)`, clamped
/// to `[0, 1]`. The set therefore sits near a low-dimensional manifold with
/// clear group structure, which is what the reduction methods are tested on.
pub fn synthetic_prime_set(per_group: usize, shape: PatchShape, seed: u64) -> Result<PatchSet> {
    if per_group == 0 {
        return Err(Error::EmptyPatchSet);
    }
    shape.validate()?;
    let mut patches = Vec::with_capacity(per_group * 5);
    let mut labels = Vec::with_capacity(per_group * 5);
    for group in ParamGroupId::ALL {
        let mut rng = rng::derived(seed, &format!("group-{group}"));
        let base = smooth_field(shape, &mut rng, 0.22);
        let v1 = smooth_field(shape, &mut rng, 0.12);
        let v2 = smooth_field(shape, &mut rng, 0.12);
        for _ in 0..per_group {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let values: Vec<f64> = (0..shape.len())
                .map(|i| {
                    let n: f64 = rng.sample(StandardNormal);
                    0.5 + base[i] + a * v1[i] + b * v2[i] + 0.02 * n
                })
                .collect();
            patches.push(Patch::from_clamped(shape, values)?);
            labels.push(Some(group));
        }
    }
    PatchSet::new(patches, labels)
}

fn smooth_field(shape: PatchShape, rng: &mut rng::Rng, amplitude: f64) -> Vec<f64> {
    use std::f64::consts::TAU;
    let mut out = vec![0.0; shape.len()];
    for c in 0..shape.channels {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let fx = f64::from(rng.random_range(0..4u32));
                let fy = f64::from(rng.random_range(0..4u32));
                let phase = rng.random::<f64>() * TAU;
                let amp: f64 = rng.sample::<f64, _>(StandardNormal) * amplitude / 1.5;
                (fx, fy, phase, amp)
            })
            .collect();
        for y in 0..shape.height {
            for x in 0..shape.width {
                let u = x as f64 / shape.width as f64;
                let v = y as f64 / shape.height as f64;
                out[(c * shape.height + y) * shape.width + x] = waves
                    .iter()
                    .map(|(fx, fy, ph, a)| a * (TAU * (fx * u + fy * v) + ph).sin())
                    .sum();
            }
        }
    }
    out
}

/// Distinct parameter groups present in the set, in label order.
pub fn groups_present(set: &PatchSet) -> Vec<ParamGroupId> {
    let seen: HashSet<_> = set.labels().iter().flatten().copied().collect();
    let mut v: Vec<_> = seen.into_iter().collect();
    v.sort();
    v
}
