//! Access to an external object detector.
//!
//! A [`Detector`] turns one composited image into person detections. The
//! HTTP client posts PNG bytes to `{base}/detect` and expects
//! `{"boxes": [[x1, y1, x2, y2], ...], "scores": [...], "classes": [...]}`
//! back. Detections can also be ingested from JSON-lines files, and any
//! detector can sit behind the on-disk [`DetectionCache`].

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::compositor::{Annotation, Image};
use crate::error::{Error, Result};
use crate::evaluation::{Detection, PixelBox};

pub const PERSON: &str = "person";

/// Overrides the configured endpoint URL when set.
pub const URL_ENV: &str = "PATCHFOLD_DETECTOR_URL";
/// Sent as a bearer token when set.
pub const TOKEN_ENV: &str = "PATCHFOLD_DETECTOR_TOKEN";

pub struct DetectRequest<'a> {
    pub image_id: &'a str,
    pub patch_id: &'a str,
    pub image: &'a Image,
}

pub trait Detector: Sync {
    /// Person detections for one image, in pixel coordinates.
    fn detect(&self, request: &DetectRequest) -> Result<Vec<Detection>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub timeout_secs: f64,
    pub retries: u32,
    /// Maximum number of requests in flight.
    pub batch: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8080".into(),
            timeout_secs: 30.0,
            retries: 2,
            batch: 4,
        }
    }
}

impl EndpointConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            p.push(format!("detector timeout {} must be positive", self.timeout_secs));
        }
        if self.batch == 0 {
            p.push("detector batch must be at least 1".into());
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            p.push(format!("detector url {:?} is not http(s)", self.base_url));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn with_env_override(mut self) -> Self {
        if let Ok(url) = std::env::var(URL_ENV) {
            if !url.is_empty() {
                self.base_url = url;
            }
        }
        self
    }
}

struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpDetector {
    cfg: EndpointConfig,
    agent: ureq::Agent,
    token: Option<String>,
    slots: Slots,
    requests: AtomicUsize,
}

impl HttpDetector {
    pub fn new(cfg: EndpointConfig) -> Result<Self> {
        cfg.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            slots: Slots {
                free: Mutex::new(cfg.batch),
                cv: Condvar::new(),
            },
            cfg,
            agent,
            requests: AtomicUsize::new(0),
        })
    }

    /// Number of HTTP requests sent so far, retries included.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    fn post(&self, url: &str, req: &DetectRequest, png: &[u8]) -> std::result::Result<(u16, String), String> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut r = self
            .agent
            .post(url)
            .header("Content-Type", "image/png")
            .header("X-Image-Id", req.image_id)
            .header("X-Patch-Id", req.patch_id);
        if let Some(t) = &self.token {
            r = r.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = r.send(png).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok((status, body))
    }
}

impl Detector for HttpDetector {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>> {
        let png = req.image.png_bytes()?;
        let url = format!("{}/detect", self.cfg.base_url.trim_end_matches('/'));
        let _slot = self.slots.acquire();
        let mut last = String::new();
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 << attempt.min(6)));
            }
            match self.post(&url, req, &png) {
                Ok((200, body)) => {
                    return parse_response(&body, req.image_id, req.image.width(), req.image.height());
                }
                Ok((status, body)) if status == 429 || status >= 500 => {
                    last = format!("HTTP {status}: {}", excerpt(&body));
                }
                Ok((status, body)) => {
                    return Err(Error::Protocol(format!(
                        "{url} answered HTTP {status} for {}: {}",
                        req.image_id,
                        excerpt(&body)
                    )));
                }
                Err(e) => last = e,
            }
            log::warn!("detector request for {} failed (attempt {}): {last}", req.image_id, attempt + 1);
        }
        Err(Error::DetectorUnreachable(format!("{url}: {last}")))
    }
}

fn excerpt(s: &str) -> String {
    const MAX: usize = 200;
    match s.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}

fn is_person(class: &Value) -> bool {
    match class {
        Value::String(s) => s == PERSON,
        Value::Number(n) => n.as_u64() == Some(0),
        _ => false,
    }
}

/// Parses the response contract. Person boxes are clamped to the image and
/// dropped if nothing is left; other classes are discarded.
pub fn parse_response(body: &str, image_id: &str, width: usize, height: usize) -> Result<Vec<Detection>> {
    let bad = |what: String| Error::Protocol(format!("{what}; payload: {}", excerpt(body)));
    let v: Value = serde_json::from_str(body).map_err(|e| bad(format!("response is not JSON ({e})")))?;
    let field = |name: &str| -> Result<&Vec<Value>> {
        match v.get(name) {
            Some(Value::Array(a)) => Ok(a),
            Some(_) => Err(bad(format!("field {name:?} is not an array"))),
            None => Err(bad(format!("response missing field {name:?}"))),
        }
    };
    let boxes = field("boxes")?;
    let scores = field("scores")?;
    let classes = field("classes")?;
    if boxes.len() != scores.len() || boxes.len() != classes.len() {
        return Err(bad(format!(
            "boxes, scores and classes have lengths {}, {}, {}",
            boxes.len(),
            scores.len(),
            classes.len()
        )));
    }
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::new();
    for (i, ((b, s), c)) in boxes.iter().zip(scores).zip(classes).enumerate() {
        let coords: Option<Vec<f64>> = b.as_array().map(|a| a.iter().filter_map(Value::as_f64).collect());
        let coords = match coords {
            Some(c) if c.len() == 4 && c.iter().all(|v| v.is_finite()) => c,
            _ => return Err(bad(format!("boxes[{i}] is not four finite numbers"))),
        };
        let score = s
            .as_f64()
            .filter(|s| (0.0..=1.0).contains(s))
            .ok_or_else(|| bad(format!("scores[{i}] is not a number in [0, 1]")))?;
        if !is_person(c) {
            continue;
        }
        let bbox = [
            coords[0].clamp(0.0, w),
            coords[1].clamp(0.0, h),
            coords[2].clamp(0.0, w),
            coords[3].clamp(0.0, h),
        ];
        if bbox[0] >= bbox[2] || bbox[1] >= bbox[3] {
            log::debug!("{image_id}: dropping empty box {coords:?}");
            continue;
        }
        out.push(Detection {
            image: image_id.to_string(),
            bbox,
            score,
            class: PERSON.into(),
        });
    }
    Ok(out)
}

/// One line of a detection file or cache shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub image: String,
    pub patch_id: String,
    pub boxes: Vec<PixelBox>,
    pub scores: Vec<f64>,
    pub class: String,
}

impl CacheEntry {
    pub fn from_detections(key: Option<String>, image: &str, patch_id: &str, dets: &[Detection]) -> Self {
        Self {
            key,
            image: image.into(),
            patch_id: patch_id.into(),
            boxes: dets.iter().map(|d| d.bbox).collect(),
            scores: dets.iter().map(|d| d.score).collect(),
            class: PERSON.into(),
        }
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.boxes
            .iter()
            .zip(&self.scores)
            .map(|(b, s)| Detection {
                image: self.image.clone(),
                bbox: *b,
                score: *s,
                class: self.class.clone(),
            })
            .collect()
    }

    fn check(&self, width: usize, height: usize) -> std::result::Result<(), String> {
        if self.boxes.len() != self.scores.len() {
            return Err(format!("{} boxes but {} scores", self.boxes.len(), self.scores.len()));
        }
        let (w, h) = (width as f64, height as f64);
        for (b, s) in self.boxes.iter().zip(&self.scores) {
            if !(0.0..=1.0).contains(s) {
                return Err(format!("score {s} outside [0, 1]"));
            }
            let inside = b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= w && b[3] <= h;
            if !inside {
                return Err(format!("box {b:?} outside the {width}x{height} image"));
            }
            if b[0] >= b[2] || b[1] >= b[3] {
                return Err(format!("box {b:?} is empty"));
            }
        }
        Ok(())
    }
}

/// Content key of a request: SHA-256 over the PNG bytes, a zero byte and
/// the patch id.
pub fn cache_key(png: &[u8], patch_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(png);
    h.update([0u8]);
    h.update(patch_id.as_bytes());
    hex::encode(h.finalize())
}

const SHARD: &str = "detections.jsonl";

/// Append-only store of detector answers. Each entry is one JSON line
/// written with a single append.
pub struct DetectionCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, CacheEntry>>,
    file: Mutex<File>,
}

impl DetectionCache {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(Error::file(dir))?;
        let path = dir.join(SHARD);
        let mut entries = HashMap::new();
        if path.exists() {
            let r = BufReader::new(File::open(&path).map_err(Error::file(&path))?);
            for (n, line) in r.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: CacheEntry = match serde_json::from_str(&line) {
                    Ok(e) => e,
                    Err(err) => {
                        log::warn!("{}:{}: skipping unreadable cache line ({err})", path.display(), n + 1);
                        continue;
                    }
                };
                if let Some(k) = e.key.clone() {
                    entries.entry(k).or_insert(e);
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(Error::file(&path))?;
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            file: Mutex::new(file),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn insert(&self, entry: CacheEntry) -> Result<()> {
        let key = entry
            .key
            .clone()
            .ok_or_else(|| Error::invalid("cache entries need a key"))?;
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        {
            let mut f = self.file.lock().unwrap();
            if self.entries.read().unwrap().contains_key(&key) {
                return Ok(());
            }
            f.write_all(line.as_bytes()).map_err(Error::file(&self.path))?;
            f.flush()?;
            self.entries.write().unwrap().insert(key, entry);
        }
        Ok(())
    }
}

/// Serves repeated requests from a [`DetectionCache`].
pub struct CachedDetector<D> {
    inner: D,
    cache: DetectionCache,
    hits: AtomicUsize,
}

impl<D: Detector> CachedDetector<D> {
    pub fn new(inner: D, cache: DetectionCache) -> Self {
        Self {
            inner,
            cache,
            hits: AtomicUsize::new(0),
        }
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }

    pub fn cache(&self) -> &DetectionCache {
        &self.cache
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }
}

impl<D: Detector> Detector for CachedDetector<D> {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>> {
        let key = cache_key(&req.image.png_bytes()?, req.patch_id);
        if let Some(e) = self.cache.get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            let mut dets = e.detections();
            for d in &mut dets {
                d.image = req.image_id.to_string();
            }
            return Ok(dets);
        }
        let dets = self.inner.detect(req)?;
        self.cache
            .insert(CacheEntry::from_detections(Some(key), req.image_id, req.patch_id, &dets))?;
        Ok(dets)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub entries: Vec<CacheEntry>,
    /// `file:line: reason` for every entry that failed validation.
    pub rejected: Vec<String>,
}

/// Reads every `*.jsonl` file in `dir` (sorted by name). Image sizes for
/// the bounds check come from `annotations`.
pub fn ingest_detections(dir: &Path, annotations: &[Annotation]) -> Result<Ingested> {
    let sizes: HashMap<&str, (usize, usize)> = annotations
        .iter()
        .map(|a| (a.image.as_str(), (a.width, a.height)))
        .collect();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::file(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    let mut seen: HashMap<(String, String), String> = HashMap::new();
    let mut out = Ingested {
        entries: Vec::new(),
        rejected: Vec::new(),
    };
    for file in files {
        let r = BufReader::new(File::open(&file).map_err(Error::file(&file))?);
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let at = format!("{}:{}", file.display(), n + 1);
            let e: CacheEntry = serde_json::from_str(&line).map_err(|err| Error::Format(format!("{at}: {err}")))?;
            let reject = |why: String| {
                log::warn!("{at}: rejected: {why}");
                format!("{at}: {why}")
            };
            if e.class != PERSON {
                out.rejected.push(reject(format!("class {:?} is not {PERSON:?}", e.class)));
                continue;
            }
            let Some(&(w, h)) = sizes.get(e.image.as_str()) else {
                out.rejected.push(reject(format!("unknown image {:?}", e.image)));
                continue;
            };
            if let Err(why) = e.check(w, h) {
                out.rejected.push(reject(why));
                continue;
            }
            let k = (e.image.clone(), e.patch_id.clone());
            if let Some(first) = seen.get(&k) {
                return Err(Error::Format(format!(
                    "duplicate detections for image {:?} patch {:?}: {first} and {at}",
                    k.0, k.1
                )));
            }
            seen.insert(k, at);
            out.entries.push(e);
        }
    }
    Ok(out)
}

/// Answers requests from ingested detection files.
pub struct FileDetector {
    entries: HashMap<(String, String), CacheEntry>,
}

impl FileDetector {
    pub fn new(entries: Vec<CacheEntry>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|e| ((e.image.clone(), e.patch_id.clone()), e))
                .collect(),
        }
    }

    pub fn from_dir(dir: &Path, annotations: &[Annotation]) -> Result<Self> {
        Ok(Self::new(ingest_detections(dir, annotations)?.entries))
    }
}

impl Detector for FileDetector {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>> {
        self.entries
            .get(&(req.image_id.to_string(), req.patch_id.to_string()))
            .map(CacheEntry::detections)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "no ingested detections for image {:?} with patch {:?}",
                    req.image_id, req.patch_id
                ))
            })
    }
}
