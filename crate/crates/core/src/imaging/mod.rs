//! CPU reference implementations of the frame pipeline: illumination
//! flattening, rainbow (iridescence) scoring and region proposal.
//!
//! All functions are pure. Neighborhoods are `window x window` squares
//! centered on the pixel, with coordinates clamped to the frame (edge
//! replication), so every pixel sees exactly `window²` samples.

pub mod pnm;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BoundingBox, Frame};

/// Number of 30° hue bins used for rainbow coverage.
pub const HUE_BINS: usize = 12;
/// Pixels below this saturation do not contribute a hue.
pub const SATURATION_FLOOR: f64 = 0.2;
/// Pixels below this value (brightness) do not contribute a hue.
pub const VALUE_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImagingError {
    #[error("window {window} must be odd and within 1..={max}")]
    InvalidWindow { window: u32, max: u32 },
    #[error("mask is empty")]
    EmptyMask,
    #[error("pixel threshold {0} out of [0,1]")]
    InvalidThreshold(f64),
    #[error("{0}")]
    Shape(String),
}

/// Per-channel signed deviation from the local mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlattenedFrame {
    pub width: u32,
    pub height: u32,
    pub values: Vec<[f64; 3]>,
}

impl FlattenedFrame {
    /// Mean absolute deviation over all pixels and channels.
    pub fn mean_abs_deviation(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .values
            .iter()
            .map(|v| v[0].abs() + v[1].abs() + v[2].abs())
            .sum();
        total / (self.values.len() as f64 * 3.0)
    }
}

/// Per-pixel rainbow score in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RainbowMask {
    pub width: u32,
    pub height: u32,
    pub scores: Vec<f64>,
}

impl RainbowMask {
    pub fn new(width: u32, height: u32, scores: Vec<f64>) -> Result<Self, ImagingError> {
        if scores.len() != width as usize * height as usize {
            return Err(ImagingError::Shape(format!(
                "{} scores for a {width}x{height} mask",
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(ImagingError::Shape(format!("score {s} out of [0,1]")));
        }
        Ok(Self {
            width,
            height,
            scores,
        })
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.scores[y as usize * self.width as usize + x as usize]
    }

    /// Scores quantized to 8 bits, for debugging output only.
    pub fn to_gray_bytes(&self) -> Vec<u8> {
        self.scores
            .iter()
            .map(|s| (s * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// A candidate defect area extracted from a rainbow mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub mean_score: f64,
    pub area: u64,
}

/// Hue, saturation and value of an 8-bit RGB pixel. Hue in degrees
/// `[0,360)`, saturation and value in `[0,1]`. Gray pixels get hue 0.
pub fn rgb_to_hsv(rgb: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max / 255.0;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        let h = 60.0 * ((g - b) / delta);
        if h < 0.0 {
            h + 360.0
        } else {
            h
        }
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (if h >= 360.0 { h - 360.0 } else { h }, s, v)
}

/// Index of the 30° bin holding `hue`.
#[inline]
pub fn hue_bin(hue: f64) -> usize {
    ((hue / 30.0).floor() as usize).min(HUE_BINS - 1)
}

fn check_window(window: u32, width: u32, height: u32) -> Result<(), ImagingError> {
    let max = width.min(height);
    if window == 0 || window % 2 == 0 || window > max {
        return Err(ImagingError::InvalidWindow { window, max });
    }
    Ok(())
}

#[inline]
fn clamp_coord(c: i64, len: u32) -> usize {
    c.clamp(0, len as i64 - 1) as usize
}

/// Separable clamped window reduction. `combine` must be associative and
/// commutative (sum, bitwise or).
fn window_reduce<T, F>(values: &[T], width: u32, height: u32, window: u32, zero: T, combine: F) -> Vec<T>
where
    T: Copy,
    F: Fn(T, T) -> T,
{
    let (w, h) = (width as usize, height as usize);
    let r = (window / 2) as i64;
    let mut rows = vec![zero; w * h];
    for y in 0..h {
        let row = &values[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = zero;
            for d in -r..=r {
                acc = combine(acc, row[clamp_coord(x as i64 + d, width)]);
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![zero; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = zero;
            for d in -r..=r {
                acc = combine(acc, rows[clamp_coord(y as i64 + d, height) * w + x]);
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Per-channel sum over each pixel's clamped neighborhood.
fn box_sums(frame: &Frame, window: u32) -> Vec<[u64; 3]> {
    let values: Vec<[u64; 3]> = frame.pixels.iter().map(|p| p.map(u64::from)).collect();
    window_reduce(&values, frame.width, frame.height, window, [0; 3], |a, b| {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    })
}

/// Local mean per channel over the clamped `window x window` neighborhood.
pub fn box_mean(frame: &Frame, window: u32) -> Result<Vec<[f64; 3]>, ImagingError> {
    check_window(window, frame.width, frame.height)?;
    let n = (window as u64 * window as u64) as f64;
    Ok(box_sums(frame, window)
        .into_iter()
        .map(|s| s.map(|c| c as f64 / n))
        .collect())
}

/// Subtract the local mean from every pixel and channel.
pub fn flatten(frame: &Frame, window: u32) -> Result<FlattenedFrame, ImagingError> {
    let means = box_mean(frame, window)?;
    let values = frame
        .pixels
        .iter()
        .zip(means)
        .map(|(p, m)| {
            [
                p[0] as f64 - m[0],
                p[1] as f64 - m[1],
                p[2] as f64 - m[2],
            ]
        })
        .collect();
    Ok(FlattenedFrame {
        width: frame.width,
        height: frame.height,
        values,
    })
}

/// Score every pixel by how many hues its neighborhood spans, weighted by
/// the neighborhood's mean saturation.
pub fn rainbow_mask(frame: &Frame, window: u32) -> Result<RainbowMask, ImagingError> {
    check_window(window, frame.width, frame.height)?;
    let mut bins = Vec::with_capacity(frame.pixels.len());
    let mut sats = Vec::with_capacity(frame.pixels.len());
    for &p in &frame.pixels {
        let (h, s, v) = rgb_to_hsv(p);
        let bit = if s >= SATURATION_FLOOR && v >= VALUE_FLOOR {
            1u16 << hue_bin(h)
        } else {
            0
        };
        bins.push(bit);
        sats.push(s);
    }
    let occupied = window_reduce(&bins, frame.width, frame.height, window, 0u16, |a, b| a | b);
    let sat_sums = window_reduce(&sats, frame.width, frame.height, window, 0.0f64, |a, b| a + b);
    let n = (window as u64 * window as u64) as f64;
    let scores = occupied
        .into_iter()
        .zip(sat_sums)
        .map(|(bits, s)| {
            let coverage = bits.count_ones() as f64 / HUE_BINS as f64;
            (coverage * (s / n)).clamp(0.0, 1.0)
        })
        .collect();
    Ok(RainbowMask {
        width: frame.width,
        height: frame.height,
        scores,
    })
}

/// Whole-frame rainbow score: the nearest-rank 95th percentile of pixel scores.
pub fn frame_rainbow_score(mask: &RainbowMask) -> Result<f64, ImagingError> {
    if mask.scores.is_empty() {
        return Err(ImagingError::EmptyMask);
    }
    let mut sorted = mask.scores.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

/// 4-connected components of pixels scoring at least `pixel_threshold`,
/// keeping those with at least `min_area` pixels.
///
/// Sorted by mean score descending, then by `(y_min, x_min)`.
pub fn propose_regions(
    mask: &RainbowMask,
    pixel_threshold: f64,
    min_area: u64,
) -> Result<Vec<RegionProposal>, ImagingError> {
    if !(0.0..=1.0).contains(&pixel_threshold) {
        return Err(ImagingError::InvalidThreshold(pixel_threshold));
    }
    let (w, h) = (mask.width as usize, mask.height as usize);
    let mut visited = vec![false; w * h];
    let mut stack = Vec::new();
    let mut out = Vec::new();

    for start in 0..w * h {
        if visited[start] || mask.scores[start] < pixel_threshold {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0u64;
        let mut total = 0.0;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            area += 1;
            total += mask.scores[i];
            let mut visit = |j: usize| {
                if !visited[j] && mask.scores[j] >= pixel_threshold {
                    visited[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if area >= min_area {
            out.push(RegionProposal {
                bbox: BoundingBox {
                    x_min: x0 as u32,
                    y_min: y0 as u32,
                    x_max: x1 as u32 + 1,
                    y_max: y1 as u32 + 1,
                },
                mean_score: (total / area as f64).clamp(0.0, 1.0),
                area,
            });
        }
    }
    out.sort_by(|a, b| {
        b.mean_score
            .total_cmp(&a.mean_score)
            .then((a.bbox.y_min, a.bbox.x_min).cmp(&(b.bbox.y_min, b.bbox.x_min)))
            .then(a.bbox.cmp(&b.bbox))
    });
    Ok(out)
}
