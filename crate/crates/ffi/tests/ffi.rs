use std::ffi::{CStr, CString};
use std::ptr;

use patchfold_ffi::*;

fn last_error() -> String {
    let p = pf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

#[test]
fn synthetic_set_fit_encode_decode() {
    unsafe {
        let mut set = ptr::null_mut();
        assert_eq!(pf_patch_set_synthetic(4, 8, 8, 3, &mut set), PfStatus::Ok);
        assert!(pf_last_error().is_null());
        let (mut n, mut dim) = (0, 0);
        assert_eq!(pf_patch_set_len(set, &mut n), PfStatus::Ok);
        assert_eq!(pf_patch_set_dim(set, &mut dim), PfStatus::Ok);
        assert_eq!((n, dim), (20, 3 * 8 * 8));

        let mut basis = ptr::null_mut();
        assert_eq!(pf_pca_fit(set, 19, &mut basis), PfStatus::Ok);
        let mut k = 0;
        assert_eq!(pf_pca_k(basis, &mut k), PfStatus::Ok);
        assert_eq!(k, 19);

        // Full rank: decode(encode(x)) reproduces the patch.
        let mut w = vec![0.0; k];
        assert_eq!(pf_pca_encode(basis, set, 7, w.as_mut_ptr(), k), PfStatus::Ok);
        let mut values = vec![0.0f32; dim];
        assert_eq!(pf_pca_decode(basis, w.as_ptr(), k, values.as_mut_ptr(), dim), PfStatus::Ok);
        let mut again = vec![0.0; k];
        let mut one = ptr::null_mut();
        assert_eq!(pf_patch_set_synthetic(4, 8, 8, 3, &mut one), PfStatus::Ok);
        assert_eq!(pf_pca_encode(basis, one, 7, again.as_mut_ptr(), k), PfStatus::Ok);
        assert_eq!(w, again);
        assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));

        assert_eq!(pf_pca_encode(basis, set, 20, w.as_mut_ptr(), k), PfStatus::InvalidArgument);
        assert!(last_error().contains("out of range"));
        assert_eq!(pf_pca_encode(basis, set, 0, w.as_mut_ptr(), k - 1), PfStatus::InvalidArgument);

        pf_pca_free(basis);
        pf_patch_set_free(set);
        pf_patch_set_free(one);
        pf_patch_set_free(ptr::null_mut());
    }
}

#[test]
fn basis_survives_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().join("pca").to_str().unwrap()).unwrap();
    unsafe {
        let mut set = ptr::null_mut();
        assert_eq!(pf_patch_set_synthetic(2, 4, 4, 1, &mut set), PfStatus::Ok);
        let mut basis = ptr::null_mut();
        assert_eq!(pf_pca_fit(set, 3, &mut basis), PfStatus::Ok);
        assert_eq!(pf_pca_save(basis, out.as_ptr()), PfStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(pf_pca_load(out.as_ptr(), &mut loaded), PfStatus::Ok);
        let (mut a, mut b) = (vec![0.0; 3], vec![0.0; 3]);
        assert_eq!(pf_pca_encode(basis, set, 1, a.as_mut_ptr(), 3), PfStatus::Ok);
        assert_eq!(pf_pca_encode(loaded, set, 1, b.as_mut_ptr(), 3), PfStatus::Ok);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
        pf_pca_free(basis);
        pf_pca_free(loaded);
        pf_patch_set_free(set);
    }
}

#[test]
fn failures_set_codes_and_messages() {
    unsafe {
        let mut n = 0;
        assert_eq!(pf_patch_set_len(ptr::null(), &mut n), PfStatus::NullArgument);
        assert_eq!(last_error(), "set is null");

        let missing = CString::new("/definitely/not/here").unwrap();
        let mut set = ptr::null_mut();
        assert_eq!(pf_patch_set_load(missing.as_ptr(), ptr::null(), &mut set), PfStatus::Io);
        assert!(last_error().contains("manifest.json"));
        assert!(set.is_null());

        assert_eq!(pf_patch_set_synthetic(0, 4, 4, 1, &mut set), PfStatus::InvalidArgument);

        // A successful call clears the message.
        assert_eq!(pf_patch_set_synthetic(1, 4, 4, 1, &mut set), PfStatus::Ok);
        assert!(pf_last_error().is_null());
        let mut basis = ptr::null_mut();
        assert_eq!(pf_pca_fit(set, 99, &mut basis), PfStatus::InvalidArgument);
        pf_patch_set_free(set);
    }
    assert_eq!(unsafe { CStr::from_ptr(pf_version()) }.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn average_precision_over_c_structs() {
    let gts = [PfGroundTruth {
        image: 1,
        bbox: [0.0, 0.0, 10.0, 10.0],
    }];
    let dets = [
        PfDetection {
            image: 1,
            bbox: [50.0, 50.0, 60.0, 60.0],
            score: 0.9,
        },
        PfDetection {
            image: 1,
            bbox: [0.0, 0.0, 10.0, 6.0],
            score: 0.8,
        },
    ];
    let mut ap = -1.0;
    unsafe {
        assert_eq!(pf_average_precision(dets.as_ptr(), 2, gts.as_ptr(), 1, 0.5, &mut ap), PfStatus::Ok);
        assert_eq!(ap, 0.5);
        assert_eq!(pf_average_precision(dets.as_ptr(), 2, gts.as_ptr(), 1, 0.7, &mut ap), PfStatus::Ok);
        assert_eq!(ap, 0.0);
        assert_eq!(pf_average_precision(ptr::null(), 0, ptr::null(), 0, 0.5, &mut ap), PfStatus::Ok);
        assert_eq!(ap, 1.0);
        assert_eq!(pf_average_precision(ptr::null(), 2, gts.as_ptr(), 1, 0.5, &mut ap), PfStatus::NullArgument);
        assert_eq!(pf_average_precision(dets.as_ptr(), 2, gts.as_ptr(), 1, 1.5, &mut ap), PfStatus::InvalidArgument);
    }
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/patchfold.h")).unwrap();
    for name in [
        "PATCHFOLD_H",
        "PF_STATUS_OK",
        "PF_STATUS_DETECTOR_UNREACHABLE",
        "typedef struct PfPatchSet PfPatchSet;",
        "typedef struct PfEigenBasis PfEigenBasis;",
        "pf_last_error(void)",
        "pf_pca_fit(",
        "pf_pca_decode(",
        "pf_average_precision(",
        "pf_patch_set_free(",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
