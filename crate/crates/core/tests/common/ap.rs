//! Average-precision reference implementation and the checks built on it.

use patchfold::detector::PERSON;
use patchfold::evaluation::{average_precision, iou, map_range, Detection, GroundTruth, Interpolation, PixelBox};
use rand::Rng;

pub fn det(img: &str, b: PixelBox, score: f64) -> Detection {
    Detection {
        image: img.into(),
        bbox: b,
        score,
        class: PERSON.into(),
    }
}

pub fn gt(img: &str, b: PixelBox) -> GroundTruth {
    GroundTruth {
        image: img.into(),
        bbox: b,
    }
}

pub fn check_hand_cases() {
    let g = vec![gt("a", [0.0, 0.0, 10.0, 10.0])];
    assert_eq!(average_precision(&[det("a", [0.0, 0.0, 10.0, 10.0], 0.9)], &g, 0.5), 1.0);

    // FP at 0.9 ahead of a TP with IoU 0.6 at 0.8.
    let fp_then_tp = vec![
        det("a", [50.0, 50.0, 60.0, 60.0], 0.9),
        det("a", [0.0, 0.0, 10.0, 6.0], 0.8),
    ];
    assert_eq!(iou(&fp_then_tp[1].bbox, &g[0].bbox), 0.6);
    assert_eq!(average_precision(&fp_then_tp, &g, 0.5), 0.5);
    assert_eq!(average_precision(&fp_then_tp, &g, 0.7), 0.0);

    let all_06 = vec![det("a", [0.0, 0.0, 10.0, 6.0], 0.8)];
    let (m50, m5095) = map_range(&all_06, &g, Interpolation::Point101);
    assert_eq!(m50, 1.0);
    assert!((m5095 - 0.3).abs() < 1e-15, "{m5095}");

    assert_eq!(map_range(&[det("a", [0.0, 0.0, 10.0, 10.0], 1.0)], &g, Interpolation::Point101), (1.0, 1.0));
    assert_eq!(map_range(&[], &g, Interpolation::Point101), (0.0, 0.0));
}

/// Independent reference: brute-force greedy matching and an explicit
/// maximum over all prefixes for every recall point.
pub fn oracle_ap(dets: &[Detection], gts: &[GroundTruth], t: f64) -> f64 {
    if gts.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    // Stable insertion sort, descending by score.
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && dets[idx[j - 1]].score < dets[idx[j]].score {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::new();
    for &d in &idx {
        let mut best = None;
        let mut best_iou = -1.0;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image != dets[d].image {
                continue;
            }
            let v = pixel_iou(&dets[d].bbox, &gt.bbox);
            if v >= t && v > best_iou {
                best = Some(g);
                best_iou = v;
            }
        }
        if let Some(g) = best {
            used[g] = true;
        }
        hits.push(best.is_some());
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let mut best: f64 = 0.0;
        for k in 1..=hits.len() {
            let tp = hits[..k].iter().filter(|&&h| h).count() as f64;
            if tp / gts.len() as f64 >= r {
                best = best.max(tp / k as f64);
            }
        }
        total += best;
    }
    total / 101.0
}

/// IoU of integer boxes by counting unit cells.
pub fn pixel_iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let mut inter = 0;
    let mut union = 0;
    for y in -8..40 {
        for x in -8..40 {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let ina = fx > a[0] && fx < a[2] && fy > a[1] && fy < a[3];
            let inb = fx > b[0] && fx < b[2] && fy > b[1] && fy < b[3];
            inter += (ina && inb) as u32;
            union += (ina || inb) as u32;
        }
    }
    if union == 0 {
        0.0
    } else {
        f64::from(inter) / f64::from(union)
    }
}

pub fn random_box(r: &mut impl Rng) -> PixelBox {
    let x1 = r.random_range(0..24) as f64;
    let y1 = r.random_range(0..24) as f64;
    [x1, y1, x1 + r.random_range(1..8) as f64, y1 + r.random_range(1..8) as f64]
}

pub fn random_instance(seed: u64) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut r = super::rng(seed);
    let images = ["a", "b", "c"];
    let gts: Vec<_> = (0..r.random_range(0..7))
        .map(|_| gt(images[r.random_range(0..3)], random_box(&mut r)))
        .collect();
    let mut dets = Vec::new();
    for _ in 0..r.random_range(0..10) {
        let score = (r.random_range(0..6) as f64) / 5.0;
        // Half of the detections perturb a ground-truth box.
        let d = if !gts.is_empty() && r.random::<bool>() {
            let g = &gts[r.random_range(0..gts.len())];
            let dx = r.random_range(-2..=2) as f64;
            let b = [g.bbox[0] + dx, g.bbox[1], (g.bbox[2] + dx).max(g.bbox[0] + dx + 1.0), g.bbox[3]];
            det(&g.image, b, score)
        } else {
            det(images[r.random_range(0..3)], random_box(&mut r), score)
        };
        dets.push(d);
    }
    (dets, gts)
}

pub fn check_random_instances(count: u64) {
    let thresholds = [0.1, 0.3, 0.5, 0.55, 0.7, 0.9];
    for seed in 0..count {
        let (dets, gts) = random_instance(seed);
        let mut prev = f64::INFINITY;
        for &t in &thresholds {
            let ap = average_precision(&dets, &gts, t);
            let want = oracle_ap(&dets, &gts, t);
            assert!((ap - want).abs() < 1e-12, "seed {seed} t {t}: {ap} vs {want}");
            assert!(ap <= prev + 1e-12, "seed {seed}: AP grew with threshold");
            prev = ap;
        }
        // Strictly increasing map of the scores keeps the ranking and ties.
        let warped: Vec<_> = dets
            .iter()
            .map(|d| Detection {
                score: (3.0 * d.score).exp() / 50.0 + 0.01,
                ..d.clone()
            })
            .collect();
        for &t in &thresholds {
            assert_eq!(average_precision(&dets, &gts, t), average_precision(&warped, &gts, t), "seed {seed}");
        }
        let (m50, m5095) = map_range(&dets, &gts, Interpolation::Point101);
        assert!(m5095 <= m50 + 1e-12);
        assert!((0.0..=1.0).contains(&m50) && (0.0..=1.0).contains(&m5095));
    }
}
