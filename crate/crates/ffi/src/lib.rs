//! C interface to patchfold.
//!
//! Every function returns a [`PfStatus`]. On failure the message is kept
//! per thread and can be read with [`pf_last_error`] until the next call
//! on the same thread. Objects are opaque handles owned by the caller and
//! released with the matching `*_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use patchfold::eigen::{fit_pca, EigenBasis, WeightVector};
use patchfold::evaluation::{self, Detection, GroundTruth, Interpolation};
use patchfold::patch::{load_patch_set, synthetic_prime_set, PatchSet, PatchShape};
use patchfold::Error;

/// Result codes. 2, 3 and 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Runtime = 3,
    DetectorUnreachable = 4,
    InvalidArgument = 5,
    Io = 6,
    Format = 7,
    Panic = 8,
}

/// A loaded or generated set of patches.
pub struct PfPatchSet(PatchSet);

/// A fitted eigenpatch basis.
pub struct PfEigenBasis(EigenBasis);

/// One scored detection. Detections and ground truth are matched by
/// `image`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PfDetection {
    pub image: u64,
    /// x1, y1, x2, y2 in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PfGroundTruth {
    pub image: u64,
    pub bbox: [f64; 4],
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PfStatus {
    match e {
        Error::Config(_) => PfStatus::Config,
        Error::DetectorUnreachable(_) => PfStatus::DetectorUnreachable,
        Error::InvalidArgument(_) | Error::ShapeMismatch(_) | Error::EmptyPatchSet => PfStatus::InvalidArgument,
        Error::File { .. } | Error::Io(_) => PfStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Image(_) => PfStatus::Format,
        _ => PfStatus::Runtime,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PfStatus::Ok,
        Ok(Err(Fail::Null(name))) => {
            set_error(format!("{name} is null"));
            PfStatus::NullArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            PfStatus::Panic
        }
    }
}

unsafe fn obj<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(name))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(name))
}

unsafe fn path(p: *const c_char, name: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument(format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the patches listed in `manifest`, resolving names against `dir`.
/// `manifest` may be NULL for `<dir>/manifest.json`.
#[no_mangle]
pub unsafe extern "C" fn pf_patch_set_load(
    dir: *const c_char,
    manifest: *const c_char,
    out: *mut *mut PfPatchSet,
) -> PfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let dir = path(dir, "dir")?;
        let manifest = if manifest.is_null() {
            dir.join("manifest.json")
        } else {
            path(manifest, "manifest")?
        };
        *out = Box::into_raw(Box::new(PfPatchSet(load_patch_set(&dir, &manifest)?)));
        Ok(())
    })
}

/// Synthetic labelled set of `5 * per_group` RGB patches.
#[no_mangle]
pub unsafe extern "C" fn pf_patch_set_synthetic(
    per_group: usize,
    height: usize,
    width: usize,
    seed: u64,
    out: *mut *mut PfPatchSet,
) -> PfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let set = synthetic_prime_set(per_group, PatchShape::new(height, width), seed)?;
        *out = Box::into_raw(Box::new(PfPatchSet(set)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pf_patch_set_len(set: *const PfPatchSet, out: *mut usize) -> PfStatus {
    guard(|| {
        *out_ptr(out, "out")? = obj(set, "set")?.0.len();
        Ok(())
    })
}

/// Values per patch (channels × height × width).
#[no_mangle]
pub unsafe extern "C" fn pf_patch_set_dim(set: *const PfPatchSet, out: *mut usize) -> PfStatus {
    guard(|| {
        *out_ptr(out, "out")? = obj(set, "set")?.0.shape().len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pf_patch_set_free(set: *mut PfPatchSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

#[no_mangle]
pub unsafe extern "C" fn pf_pca_fit(set: *const PfPatchSet, k: usize, out: *mut *mut PfEigenBasis) -> PfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let basis = fit_pca(&obj(set, "set")?.0, k)?;
        *out = Box::into_raw(Box::new(PfEigenBasis(basis)));
        Ok(())
    })
}

/// Reads a basis written by `patchfold fit-pca` or [`pf_pca_save`].
#[no_mangle]
pub unsafe extern "C" fn pf_pca_load(dir: *const c_char, out: *mut *mut PfEigenBasis) -> PfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (basis, _) = EigenBasis::load(&path(dir, "dir")?)?;
        *out = Box::into_raw(Box::new(PfEigenBasis(basis)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pf_pca_save(basis: *const PfEigenBasis, dir: *const c_char) -> PfStatus {
    guard(|| {
        let dir = path(dir, "dir")?;
        std::fs::create_dir_all(&dir).map_err(Error::file(&dir))?;
        obj(basis, "basis")?.0.save(&dir, None)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pf_pca_k(basis: *const PfEigenBasis, out: *mut usize) -> PfStatus {
    guard(|| {
        *out_ptr(out, "out")? = obj(basis, "basis")?.0.k();
        Ok(())
    })
}

/// Writes the `k` weights of patch `index` into `weights[0..len]`;
/// `len` must equal `k`.
#[no_mangle]
pub unsafe extern "C" fn pf_pca_encode(
    basis: *const PfEigenBasis,
    set: *const PfPatchSet,
    index: usize,
    weights: *mut f64,
    len: usize,
) -> PfStatus {
    guard(|| {
        let basis = &obj(basis, "basis")?.0;
        let set = &obj(set, "set")?.0;
        let out = slice_mut(weights, len, "weights")?;
        let (patch, _) = set
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("index {index} out of range for {} patches", set.len())))?;
        let w = basis.encode(patch)?;
        if w.0.len() != len {
            return Err(Error::ShapeMismatch(format!("{len} slots for {} weights", w.0.len())).into());
        }
        out.copy_from_slice(&w.0);
        Ok(())
    })
}

/// Decodes `k` weights into a clamped patch written channel-major to
/// `values[0..len]`.
#[no_mangle]
pub unsafe extern "C" fn pf_pca_decode(
    basis: *const PfEigenBasis,
    weights: *const f64,
    k: usize,
    values: *mut f32,
    len: usize,
) -> PfStatus {
    guard(|| {
        let basis = &obj(basis, "basis")?.0;
        let w = slice(weights, k, "weights")?;
        let out = slice_mut(values, len, "values")?;
        let patch = basis.decode(&WeightVector(w.to_vec()))?;
        if patch.data().len() != len {
            return Err(Error::ShapeMismatch(format!("{len} slots for {} values", patch.data().len())).into());
        }
        out.copy_from_slice(patch.data());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pf_pca_free(basis: *mut PfEigenBasis) {
    if !basis.is_null() {
        drop(Box::from_raw(basis));
    }
}

/// Single-class average precision at IoU threshold `iou` with 101-point
/// interpolation.
#[no_mangle]
pub unsafe extern "C" fn pf_average_precision(
    detections: *const PfDetection,
    n_detections: usize,
    truths: *const PfGroundTruth,
    n_truths: usize,
    iou: f64,
    out: *mut f64,
) -> PfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let dets: Vec<Detection> = slice(detections, n_detections, "detections")?
            .iter()
            .map(|d| Detection {
                image: d.image.to_string(),
                bbox: d.bbox,
                score: d.score,
                class: patchfold::detector::PERSON.into(),
            })
            .collect();
        let gts: Vec<GroundTruth> = slice(truths, n_truths, "truths")?
            .iter()
            .map(|g| GroundTruth {
                image: g.image.to_string(),
                bbox: g.bbox,
            })
            .collect();
        if !(iou > 0.0 && iou <= 1.0) {
            return Err(Error::InvalidArgument(format!("IoU threshold {iou} outside (0, 1]")).into());
        }
        *out = evaluation::average_precision_with(&dets, &gts, iou, Interpolation::Point101);
        Ok(())
    })
}
