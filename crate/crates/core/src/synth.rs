//! Seeded synthetic frames for tests and demos.
//!
//! Backgrounds are low-saturation gray with a little noise, so they never
//! score as rainbow. Defects are bands of hue stripes (one 30° bin per
//! column) that light up the rainbow mask. Two classes are rendered
//! differently enough for the histogram model to separate them:
//!
//! - `Junction`: one straight, bright band.
//! - `Misaligned Junction`: two half bands offset vertically, at lower
//!   brightness.

use crate::dataset::{AnnotatedImage, Dataset, XorShift64Star};
use crate::domain::{BoundingBox, DefectClass, Frame, LabeledBox};

pub const JUNCTION: &str = "Junction";
pub const MISALIGNED: &str = "Misaligned Junction";

/// 8-bit RGB of a hue in degrees with saturation and value in `[0,1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Noisy gray frame: every channel within `level ± 6`.
pub fn gray_frame(width: u32, height: u32, level: u8, rng: &mut XorShift64Star) -> Frame {
    let pixels = (0..width as usize * height as usize)
        .map(|_| {
            let base = level as i32 + rng.below(7) as i32 - 3;
            [0, 1, 2].map(|_| (base + rng.below(7) as i32 - 3).clamp(0, 255) as u8)
        })
        .collect();
    Frame::new(width, height, pixels).expect("sized to match")
}

/// Paint hue stripes over `bbox`: column `x` gets hue `30 * (x + phase)`.
pub fn paint_stripes(frame: &mut Frame, bbox: &BoundingBox, value: f64, phase: u32) {
    for y in bbox.y_min..bbox.y_max {
        for x in bbox.x_min..bbox.x_max {
            let hue = 30.0 * ((x + phase) % 12) as f64 + 15.0;
            frame.set(x, y, hsv_to_rgb(hue, 1.0, value));
        }
    }
}

fn between(rng: &mut XorShift64Star, lo: u32, hi: u32) -> u32 {
    lo + rng.below((hi - lo + 1) as usize) as u32
}

/// One frame holding one defect of `class` (either [`JUNCTION`] or
/// [`MISALIGNED`]), with its ground-truth box.
pub fn render_defect(class: &str, width: u32, height: u32, rng: &mut XorShift64Star) -> (Frame, LabeledBox) {
    assert!(width >= 64 && height >= 48, "frames must be at least 64x48");
    let level = between(rng, 90, 140) as u8;
    let mut frame = gray_frame(width, height, level, rng);
    let phase = rng.below(12) as u32;
    let bw = between(rng, width / 2, width * 3 / 4);
    let bh = between(rng, 14, 18);
    let x0 = between(rng, 4, width - bw - 4);
    let bbox = if class == MISALIGNED {
        let offset = between(rng, bh / 2, bh - 4);
        let y0 = between(rng, 4, height - bh - offset - 4);
        let half = bw / 2;
        let left = BoundingBox::new(x0, y0, x0 + half, y0 + bh).expect("ordered");
        let right = BoundingBox::new(x0 + half, y0 + offset, x0 + bw, y0 + offset + bh).expect("ordered");
        paint_stripes(&mut frame, &left, 0.6, phase);
        paint_stripes(&mut frame, &right, 0.6, phase);
        BoundingBox::new(x0, y0, x0 + bw, y0 + offset + bh).expect("ordered")
    } else {
        let y0 = between(rng, 4, height - bh - 4);
        let b = BoundingBox::new(x0, y0, x0 + bw, y0 + bh).expect("ordered");
        paint_stripes(&mut frame, &b, 1.0, phase);
        b
    };
    let class = DefectClass::new(class).expect("non-empty");
    (frame, LabeledBox { class, bbox })
}

/// A two-class dataset of `per_class` images per class, interleaved, with
/// image refs `img-0000`, `img-0001`, ...
pub fn two_class_dataset(id: &str, per_class: usize, width: u32, height: u32, seed: u64) -> (Dataset, Vec<Frame>) {
    let mut rng = XorShift64Star::seed_from(seed);
    let classes = vec![DefectClass::new(JUNCTION).unwrap(), DefectClass::new(MISALIGNED).unwrap()];
    let mut ds = Dataset::new(id, id, classes);
    let mut frames = Vec::new();
    for i in 0..per_class * 2 {
        let class = if i % 2 == 0 { JUNCTION } else { MISALIGNED };
        let (frame, obj) = render_defect(class, width, height, &mut rng);
        ds.images.push(AnnotatedImage {
            image_ref: format!("img-{i:04}"),
            width,
            height,
            objects: vec![obj],
        });
        frames.push(frame);
    }
    (ds, frames)
}
