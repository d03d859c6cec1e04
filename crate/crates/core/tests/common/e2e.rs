//! The command-line pipeline against the mock detector, with golden files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use super::mock::{pixel_detector, MockServer};
use patchfold::patch::{make_grayscale_patches, save_patch_set, synthetic_prime_set, PatchFormat, PatchShape};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn patchfold<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_patchfold"))
        .args(args)
        .env_remove("PATCHFOLD_DETECTOR_URL")
        .env_remove("PATCHFOLD_DETECTOR_TOKEN")
        .output()
        .unwrap()
}

pub fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Compares against a committed golden file; `UPDATE_GOLDEN=1` rewrites it.
pub fn golden(name: &str, actual: &str) {
    let path = fixtures().join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "golden {name} differs");
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn write_primes(dir: &Path) -> PathBuf {
    let set = synthetic_prime_set(3, PatchShape::new(16, 16), 1).unwrap();
    let out = dir.join("primes");
    save_patch_set(&set, &out, "prime", PatchFormat::Png8).unwrap();
    out
}

/// Fit, compose, evaluate three ways against the mock detector, then render
/// the accumulated report. Returns the LaTeX rendering.
pub fn run_pipeline(root: &Path) -> String {
    let primes = write_primes(root);
    let data = root.join("data");
    let anns = super::dataset::write_dataset(&data, 4, 3);
    let ann_file = data.join("annotations.json");
    let images = data.join("images");
    let gray = root.join("gray");
    save_patch_set(
        &make_grayscale_patches(3, PatchShape::new(16, 16)).unwrap(),
        &gray,
        "gray",
        PatchFormat::Png8,
    )
    .unwrap();
    let server = MockServer::start(pixel_detector(anns));
    let pca = root.join("pca");
    let composed = root.join("composed");
    let cache = root.join("cache");
    let report = root.join("report.csv");

    ok(patchfold(["--seed", "5", "fit-pca", "--patches", s(&primes), "--k", "8", "--out", s(&pca)]));
    ok(patchfold([
        "--seed", "5", "compose", "--annotations", s(&ann_file), "--images", s(&images), "--patch-source", "pca",
        "--model", s(&pca), "--pi", "0.25", "--out", s(&composed),
    ]));
    let eval = |extra: &[&str]| {
        let mut args = vec![
            "--seed", "5", "eval-attack", "--annotations", s(&ann_file), "--detector-url", &server.url, "--cache",
            s(&cache), "--out", s(&report),
        ];
        args.extend_from_slice(extra);
        ok(patchfold(args))
    };
    eval(&["--images", s(&composed), "--clean-only", "--mode-name", "Composed"]);
    eval(&["--images", s(&images), "--append", "--include-clean", "--patches", s(&gray), "--mode-name", "Grayscale"]);
    eval(&["--images", s(&images), "--append", "--model", s(&pca), "--count", "3", "--mode-name", "PCA (8)"]);
    // A composed image that drew no patch is byte-identical to its clean
    // original, so the clean pass finds it in the cache.
    let placements = std::fs::read_to_string(composed.join("placements.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = placements.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let untouched = (0..4)
        .filter(|i| {
            let id = format!("img_{i:03}");
            !records.iter().any(|r| r["image"] == id.as_str() && r["patched"] == true)
        })
        .count();
    let sent = server.requests();
    assert_eq!(sent, 4 + (4 - untouched) + 4 * 3 + 4 * 3);

    let out = ok(patchfold(["report", "--fixtures", s(&report.with_extension("json"))]));
    let table = String::from_utf8(out.stdout).unwrap();
    golden("e2e_report.txt", &table);
    assert_eq!(std::fs::read_to_string(root.join("report.txt")).unwrap(), table);
    golden("e2e_report.csv", &std::fs::read_to_string(&report).unwrap());

    // Re-running from the cache reproduces the row without touching the network.
    eval(&["--images", s(&images), "--append", "--model", s(&pca), "--count", "3", "--mode-name", "PCA (8)"]);
    assert_eq!(server.requests(), sent);
    let again = ok(patchfold(["report", "--fixtures", s(&report.with_extension("json"))]));
    assert_eq!(String::from_utf8(again.stdout).unwrap(), table);

    assert!(records.len() >= 8);
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(composed.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 5);
    assert_eq!(run["command"], "compose");

    let latex = ok(patchfold(["report", "--format", "latex", "--fixtures", s(&report.with_extension("json"))]));
    String::from_utf8(latex.stdout).unwrap()
}
