use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{nms, rank_order, Detector};
use crate::dataset::AnnotatedImage;
use crate::domain::{DefectClass, Detection, Frame, PipelineParams};
use crate::imaging::{hue_bin, propose_regions, rainbow_mask, rgb_to_hsv, ImagingError, HUE_BINS};

const SAT_BINS: usize = 4;
const VAL_BINS: usize = 4;
/// Length of a color histogram: 12 hue x 4 saturation x 4 value bins.
pub const HISTOGRAM_BINS: usize = HUE_BINS * SAT_BINS * VAL_BINS;
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("class {0} has no training samples")]
    NoSamples(DefectClass),
    #[error("object class {0} is not in the class list")]
    UnknownClass(DefectClass),
    #[error("image {image}: box {bbox:?} lies outside the {width}x{height} frame")]
    BoxOutsideFrame {
        image: String,
        bbox: crate::domain::BoundingBox,
        width: u32,
        height: u32,
    },
    #[error("invalid training input: {0}")]
    Invalid(String),
}

/// Nearest-centroid classifier over normalized HSV histograms of rainbow
/// region proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramModel {
    pub format_version: u32,
    pub classes: Vec<DefectClass>,
    pub centroids: BTreeMap<DefectClass, Vec<f64>>,
    /// Parameters for mask, proposal and suppression at prediction time.
    pub params: PipelineParams,
    pub trained_on: String,
}

#[inline]
fn value_bin(x: f64, bins: usize) -> usize {
    ((x * bins as f64).floor() as usize).min(bins - 1)
}

/// Normalized 12x4x4 HSV histogram of every pixel in `frame`.
pub fn color_histogram(frame: &Frame) -> Vec<f64> {
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &p in &frame.pixels {
        let (h, s, v) = rgb_to_hsv(p);
        let idx = hue_bin(h) * SAT_BINS * VAL_BINS + value_bin(s, SAT_BINS) * VAL_BINS + value_bin(v, VAL_BINS);
        counts[idx] += 1;
    }
    let total = frame.pixels.len() as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Fit one centroid per class: the mean of the normalized histograms of all
/// ground-truth crops of that class.
pub fn train_histogram_model(
    images: &[(&AnnotatedImage, &Frame)],
    classes: &[DefectClass],
    params: PipelineParams,
    trained_on: &str,
) -> Result<HistogramModel, TrainError> {
    if classes.is_empty() {
        return Err(TrainError::Invalid("no classes".into()));
    }
    params
        .validate()
        .map_err(|e| TrainError::Invalid(e.to_string()))?;
    let mut sums: BTreeMap<DefectClass, (Vec<f64>, u64)> = classes
        .iter()
        .map(|c| (c.clone(), (vec![0.0; HISTOGRAM_BINS], 0)))
        .collect();
    for (image, frame) in images {
        for obj in &image.objects {
            let entry = sums
                .get_mut(&obj.class)
                .ok_or_else(|| TrainError::UnknownClass(obj.class.clone()))?;
            if !obj.bbox.is_valid() || !frame.contains_box(&obj.bbox) {
                return Err(TrainError::BoxOutsideFrame {
                    image: image.image_ref.clone(),
                    bbox: obj.bbox,
                    width: frame.width,
                    height: frame.height,
                });
            }
            let hist = color_histogram(&frame.crop(&obj.bbox));
            for (acc, h) in entry.0.iter_mut().zip(hist) {
                *acc += h;
            }
            entry.1 += 1;
        }
    }
    let mut centroids = BTreeMap::new();
    for class in classes {
        let (sum, n) = sums.remove(class).expect("seeded above");
        if n == 0 {
            return Err(TrainError::NoSamples(class.clone()));
        }
        centroids.insert(class.clone(), sum.into_iter().map(|s| s / n as f64).collect());
    }
    Ok(HistogramModel {
        format_version: MODEL_FORMAT_VERSION,
        classes: classes.to_vec(),
        centroids,
        params,
        trained_on: trained_on.to_string(),
    })
}

impl HistogramModel {
    /// Nearest class by L1 distance, ties by class name; returns the class
    /// and the distance.
    pub fn classify(&self, histogram: &[f64]) -> (&DefectClass, f64) {
        let mut best: Option<(&DefectClass, f64)> = None;
        for (class, centroid) in &self.centroids {
            let d = l1(histogram, centroid);
            // BTreeMap iterates by name, so strict < keeps the earliest name on ties
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((class, d));
            }
        }
        best.expect("model has at least one class")
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        crate::domain::to_canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let model: HistogramModel =
            serde_json::from_str(text).map_err(|e| TrainError::Invalid(e.to_string()))?;
        model.check()?;
        Ok(model)
    }

    /// Structural validity: known format, at least one class, one centroid
    /// per class summing to 1.
    pub fn check(&self) -> Result<(), TrainError> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(TrainError::Invalid(format!(
                "unsupported model format version {}",
                self.format_version
            )));
        }
        if self.classes.is_empty() || self.centroids.len() != self.classes.len() {
            return Err(TrainError::Invalid("class list and centroids disagree".into()));
        }
        for class in &self.classes {
            let c = self
                .centroids
                .get(class)
                .ok_or_else(|| TrainError::Invalid(format!("missing centroid for {class}")))?;
            let sum: f64 = c.iter().sum();
            if c.len() != HISTOGRAM_BINS || (sum - 1.0).abs() > 1e-9 {
                return Err(TrainError::Invalid(format!("centroid for {class} is not normalized")));
            }
        }
        self.params
            .validate()
            .map_err(|e| TrainError::Invalid(e.to_string()))
    }
}

/// Predict with explicit pipeline parameters instead of the model's own.
pub fn predict_with_params(
    model: &HistogramModel,
    frame: &Frame,
    params: &PipelineParams,
) -> Result<Vec<Detection>, ImagingError> {
    let mask = rainbow_mask(frame, params.flattener_window)?;
    let proposals = propose_regions(&mask, params.rainbow_threshold, params.min_region_area)?;
    let detections: Vec<Detection> = proposals
        .iter()
        .map(|p| {
            let hist = color_histogram(&frame.crop(&p.bbox));
            let (class, d) = model.classify(&hist);
            Detection {
                bbox: p.bbox,
                class: class.clone(),
                score: (1.0 - d / 2.0).clamp(0.0, 1.0),
            }
        })
        .collect();
    let mut out = nms(&detections, params.nms_iou_threshold);
    out.sort_by(rank_order);
    Ok(out)
}

/// Run mask, proposals, nearest-centroid classification and suppression.
///
/// Frames too small for the model's window yield no detections.
pub fn predict_with_model(model: &HistogramModel, frame: &Frame) -> Vec<Detection> {
    predict_with_params(model, frame, &model.params).unwrap_or_default()
}

impl Detector for HistogramModel {
    fn name(&self) -> &str {
        "histogram"
    }

    fn classes(&self) -> &[DefectClass] {
        &self.classes
    }

    fn predict(&self, frame: &Frame) -> Vec<Detection> {
        predict_with_model(self, frame)
    }
}
