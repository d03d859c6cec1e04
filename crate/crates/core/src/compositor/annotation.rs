use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boxes smaller than 64×64 pixels are dropped from the datasets.
pub const MIN_BOX_AREA_PX: f64 = 4096.0;

/// Slack for box areas that are integral in pixels but pass through
/// normalised coordinates.
const AREA_TOLERANCE: f64 = 1e-6;

/// Centre, width and height as fractions of the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Builds a normalised box from pixel corners.
    pub fn from_pixels(x1: f64, y1: f64, x2: f64, y2: f64, width: usize, height: usize) -> Result<Self> {
        let (w, h) = (width as f64, height as f64);
        Self::new((x1 + x2) / 2.0 / w, (y1 + y2) / 2.0 / h, (x2 - x1) / w, (y2 - y1) / h)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite())
            && (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid bounding box {self:?}")))
        }
    }

    /// `[x1, y1, x2, y2]` in pixels.
    pub fn to_pixels(&self, width: usize, height: usize) -> [f64; 4] {
        let (w, h) = (width as f64, height as f64);
        [
            (self.cx - self.w / 2.0) * w,
            (self.cy - self.h / 2.0) * h,
            (self.cx + self.w / 2.0) * w,
            (self.cy + self.h / 2.0) * h,
        ]
    }

    pub fn area_px(&self, width: usize, height: usize) -> f64 {
        self.w * width as f64 * self.h * height as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    #[serde(default)]
    pub class: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<LabeledBox>,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid(format!("{}: zero image size", self.image)));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.bbox
                .validate()
                .map_err(|e| Error::invalid(format!("{} box {i}: {e}", self.image)))?;
        }
        Ok(())
    }
}

fn check_unique(annotations: &[Annotation]) -> Result<()> {
    let mut seen = HashSet::new();
    for a in annotations {
        if !seen.insert(a.image.as_str()) {
            return Err(Error::invalid(format!("duplicate image id {:?}", a.image)));
        }
    }
    Ok(())
}

/// JSON array of annotations (`image`, `width`, `height`,
/// `boxes: [{cx, cy, w, h, class}]`).
pub fn load_json_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    let annotations: Vec<Annotation> = serde_json::from_str(&text)?;
    for a in &annotations {
        a.validate()?;
    }
    check_unique(&annotations)?;
    Ok(annotations)
}

/// One `class cx cy w h` line per box in `labels/<id>.txt`; image sizes
/// come from `images/<id>.png`.
pub fn load_yolo_annotations(images: &Path, labels: &Path) -> Result<Vec<Annotation>> {
    let mut files: Vec<_> = fs::read_dir(labels)
        .map_err(Error::file(labels))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for file in files {
        let id = file
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("{}: non-UTF-8 file name", file.display())))?
            .to_string();
        let image_path = images.join(format!("{id}.png"));
        let (w, h) = ::image::image_dimensions(&image_path).map_err(|e| match e {
            ::image::ImageError::IoError(io) => Error::File {
                path: image_path.clone(),
                source: io,
            },
            other => Error::from(other),
        })?;
        let text = fs::read_to_string(&file).map_err(Error::file(&file))?;
        let mut boxes = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("{}:{}: {what}", file.display(), n + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(bad("expected `class cx cy w h`"));
            }
            let class: u32 = fields[0].parse().map_err(|_| bad("class is not an integer"))?;
            let v: Vec<f64> = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("coordinate is not a number"))?;
            let bbox = BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| bad(&e.to_string()))?;
            boxes.push(LabeledBox { bbox, class });
        }
        out.push(Annotation {
            image: id,
            width: w as usize,
            height: h as usize,
            boxes,
        });
    }
    Ok(out)
}

/// A `.json` file is read as the JSON layout, a directory as
/// `<dir>/labels/*.txt` with images in `<dir>/images`.
pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    if path.is_dir() {
        load_yolo_annotations(&path.join("images"), &path.join("labels"))
    } else {
        load_json_annotations(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FilterCounts {
    pub images: usize,
    pub boxes_before: usize,
    pub boxes_after: usize,
}

/// Removes boxes covering fewer than `min_area_px` pixels. Images are kept
/// even when all their boxes go.
pub fn filter_small_boxes(annotations: &[Annotation], min_area_px: f64) -> (Vec<Annotation>, FilterCounts) {
    let mut before = 0;
    let mut after = 0;
    let filtered = annotations
        .iter()
        .map(|a| {
            before += a.boxes.len();
            let boxes: Vec<LabeledBox> = a
                .boxes
                .iter()
                .filter(|b| b.bbox.area_px(a.width, a.height) >= min_area_px - AREA_TOLERANCE)
                .copied()
                .collect();
            after += boxes.len();
            Annotation {
                boxes,
                ..a.clone()
            }
        })
        .collect();
    (
        filtered,
        FilterCounts {
            images: annotations.len(),
            boxes_before: before,
            boxes_after: after,
        },
    )
}
