use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, DatasetError};
use crate::domain::{BoundingBox, Frame, LabeledBox};

/// A single geometric or photometric transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    /// Clockwise quarter turns, 1 to 3.
    Rotate90(u8),
    Shift { dx: i64, dy: i64 },
    /// Multiply every channel, clamping to 255.
    Brightness(f64),
    Hflip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub ops: Vec<AugmentOp>,
}

impl AugmentationSpec {
    pub fn validate(&self, width: u32, height: u32) -> Result<(), DatasetError> {
        for op in &self.ops {
            match *op {
                AugmentOp::Rotate90(k) if !(1..=3).contains(&k) => {
                    return Err(DatasetError::Parameter(format!("rotate90 takes 1-3 quarter turns, got {k}")))
                }
                AugmentOp::Shift { dx, dy } if dx.unsigned_abs() >= width as u64 || dy.unsigned_abs() >= height as u64 => {
                    return Err(DatasetError::Parameter(format!(
                        "shift ({dx},{dy}) must be smaller than the {width}x{height} image"
                    )))
                }
                AugmentOp::Brightness(f) if !(f > 0.0 && f.is_finite()) => {
                    return Err(DatasetError::Parameter(format!("brightness factor {f} must be > 0")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn rotate_cw(image: &AnnotatedImage, frame: &Frame) -> (AnnotatedImage, Frame) {
    let (w, h) = (frame.width, frame.height);
    let mut out = Frame::filled(h, w, [0; 3]).expect("non-empty");
    for y in 0..h {
        for x in 0..w {
            out.set(h - 1 - y, x, frame.get(x, y));
        }
    }
    let objects = image
        .objects
        .iter()
        .map(|o| LabeledBox {
            class: o.class.clone(),
            bbox: BoundingBox {
                x_min: h - o.bbox.y_max,
                y_min: o.bbox.x_min,
                x_max: h - o.bbox.y_min,
                y_max: o.bbox.x_max,
            },
        })
        .collect();
    (
        AnnotatedImage {
            image_ref: image.image_ref.clone(),
            width: h,
            height: w,
            objects,
        },
        out,
    )
}

fn shift(image: &AnnotatedImage, frame: &Frame, dx: i64, dy: i64) -> (AnnotatedImage, Frame) {
    let (w, h) = (frame.width as i64, frame.height as i64);
    let mut out = Frame::filled(frame.width, frame.height, [0; 3]).expect("non-empty");
    for y in 0..h {
        for x in 0..w {
            let (tx, ty) = (x + dx, y + dy);
            if (0..w).contains(&tx) && (0..h).contains(&ty) {
                out.set(tx as u32, ty as u32, frame.get(x as u32, y as u32));
            }
        }
    }
    let objects = image
        .objects
        .iter()
        .filter_map(|o| {
            let x0 = (o.bbox.x_min as i64 + dx).clamp(0, w);
            let x1 = (o.bbox.x_max as i64 + dx).clamp(0, w);
            let y0 = (o.bbox.y_min as i64 + dy).clamp(0, h);
            let y1 = (o.bbox.y_max as i64 + dy).clamp(0, h);
            BoundingBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32)
                .ok()
                .map(|bbox| LabeledBox {
                    class: o.class.clone(),
                    bbox,
                })
        })
        .collect();
    (
        AnnotatedImage {
            objects,
            ..image.clone()
        },
        out,
    )
}

fn hflip(image: &AnnotatedImage, frame: &Frame) -> (AnnotatedImage, Frame) {
    let w = frame.width;
    let mut out = frame.clone();
    for y in 0..frame.height {
        for x in 0..w {
            out.set(w - 1 - x, y, frame.get(x, y));
        }
    }
    let objects = image
        .objects
        .iter()
        .map(|o| LabeledBox {
            class: o.class.clone(),
            bbox: BoundingBox {
                x_min: w - o.bbox.x_max,
                x_max: w - o.bbox.x_min,
                ..o.bbox
            },
        })
        .collect();
    (
        AnnotatedImage {
            objects,
            ..image.clone()
        },
        out,
    )
}

fn apply(image: &AnnotatedImage, frame: &Frame, op: &AugmentOp) -> (AnnotatedImage, Frame) {
    match *op {
        AugmentOp::Rotate90(k) => {
            let mut cur = (image.clone(), frame.clone());
            for _ in 0..k {
                cur = rotate_cw(&cur.0, &cur.1);
            }
            cur
        }
        AugmentOp::Shift { dx, dy } => shift(image, frame, dx, dy),
        AugmentOp::Brightness(f) => {
            let pixels = frame
                .pixels
                .iter()
                .map(|p| p.map(|c| (c as f64 * f).round().clamp(0.0, 255.0) as u8))
                .collect();
            (
                image.clone(),
                Frame {
                    pixels,
                    ..frame.clone()
                },
            )
        }
        AugmentOp::Hflip => hflip(image, frame),
    }
}

/// Apply each op of `spec` to the original image, producing one output per
/// op. Every op is fully parameterized, so `seed` only labels the outputs
/// (`<image_ref>~aug<seed>.<k>`); identical inputs give identical outputs.
pub fn augment(
    image: &AnnotatedImage,
    pixels: &Frame,
    spec: &AugmentationSpec,
    seed: u64,
) -> Result<Vec<(AnnotatedImage, Frame)>, DatasetError> {
    if pixels.width != image.width || pixels.height != image.height {
        return Err(DatasetError::Parameter(format!(
            "annotation is {}x{} but pixels are {}x{}",
            image.width, image.height, pixels.width, pixels.height
        )));
    }
    if !image.boxes_in_bounds() {
        return Err(DatasetError::Parameter("annotation box outside image".into()));
    }
    spec.validate(image.width, image.height)?;
    Ok(spec
        .ops
        .iter()
        .enumerate()
        .map(|(k, op)| {
            let (mut img, frame) = apply(image, pixels, op);
            img.image_ref = format!("{}~aug{seed}.{k}", image.image_ref);
            (img, frame)
        })
        .collect())
}
