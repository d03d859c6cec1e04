//! Deterministic annotated images for compositing and evaluation tests.

use std::path::Path;

use patchfold::compositor::{Annotation, BoundingBox, Image, LabeledBox};
use rand::Rng;

pub const WIDTH: usize = 160;
pub const HEIGHT: usize = 128;

/// `n` images with two large boxes and one box below the area threshold
/// each. Images go to `<dir>/images/<id>.png`, annotations to
/// `<dir>/annotations.json`.
pub fn write_dataset(dir: &Path, n: usize, seed: u64) -> Vec<Annotation> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).unwrap();
    let mut r = super::rng(seed);
    let mut anns = Vec::new();
    for i in 0..n {
        let id = format!("img_{i:03}");
        let (fx, fy): (f32, f32) = (r.random_range(1.0..4.0), r.random_range(1.0..4.0));
        let tint: [f32; 3] = [r.random(), r.random(), r.random()];
        let mut data = vec![0.0f32; 3 * WIDTH * HEIGHT];
        for c in 0..3 {
            for y in 0..HEIGHT {
                for x in 0..WIDTH {
                    let u = x as f32 / WIDTH as f32;
                    let v = y as f32 / HEIGHT as f32;
                    let wave = (fx * u * 6.28 + c as f32).sin() * (fy * v * 6.28).cos();
                    data[(c * HEIGHT + y) * WIDTH + x] = (0.5 + 0.3 * wave * tint[c]).clamp(0.0, 1.0);
                }
            }
        }
        let img = Image::new(WIDTH, HEIGHT, data).unwrap();
        img.save(&images.join(format!("{id}.png"))).unwrap();
        let px = |x: f64, y: f64, w: f64, h: f64| LabeledBox {
            bbox: BoundingBox::from_pixels(x, y, x + w, y + h, WIDTH, HEIGHT).unwrap(),
            class: 0,
        };
        let ox = r.random_range(0..8) as f64;
        anns.push(Annotation {
            image: id,
            width: WIDTH,
            height: HEIGHT,
            boxes: vec![
                px(8.0 + ox, 20.0, 64.0, 96.0),
                px(84.0, 10.0 + ox, 68.0, 100.0),
                px(60.0, 2.0, 20.0, 30.0),
            ],
        });
    }
    std::fs::write(dir.join("annotations.json"), serde_json::to_string_pretty(&anns).unwrap()).unwrap();
    anns
}
