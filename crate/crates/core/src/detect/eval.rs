use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{iou, Detector};
use crate::dataset::AnnotatedImage;
use crate::domain::{DefectClass, Detection, Frame, LabeledBox};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("test split is empty")]
    EmptyTestSplit,
    #[error("iou threshold {0} out of [0,1]")]
    InvalidThreshold(f64),
    #[error("{predictions} prediction lists for {images} images")]
    LengthMismatch { images: usize, predictions: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Detector quality over a test split.
///
/// Classes with no ground truth in the split get counts but no AP and are
/// left out of the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: BTreeMap<DefectClass, f64>,
    pub map_score: f64,
    pub accuracy: f64,
    pub iou_threshold: f64,
    pub counts: BTreeMap<DefectClass, ClassCounts>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>8} {:>6} {:>6} {:>6}", "class", "AP", "TP", "FP", "FN")?;
        for (class, c) in &self.counts {
            let ap = self
                .per_class_ap
                .get(class)
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "-".into());
            writeln!(f, "{:<24} {:>8} {:>6} {:>6} {:>6}", class.as_str(), ap, c.tp, c.fp, c.fn_)?;
        }
        writeln!(f, "mAP@{:.2} = {:.4}", self.iou_threshold, self.map_score)?;
        write!(f, "accuracy = {:.4}", self.accuracy)
    }
}

/// Score precomputed predictions against ground truth.
///
/// `ground_truth[i]` and `predictions[i]` belong to image `i`. Classes are
/// the union of `classes` and every class seen in the inputs.
pub fn evaluate_predictions(
    ground_truth: &[Vec<LabeledBox>],
    predictions: &[Vec<Detection>],
    classes: &[DefectClass],
    iou_threshold: f64,
) -> Result<EvalReport, EvalError> {
    if ground_truth.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    if ground_truth.len() != predictions.len() {
        return Err(EvalError::LengthMismatch {
            images: ground_truth.len(),
            predictions: predictions.len(),
        });
    }
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(EvalError::InvalidThreshold(iou_threshold));
    }

    let mut all: Vec<DefectClass> = classes.to_vec();
    for c in ground_truth.iter().flatten().map(|o| &o.class).chain(predictions.iter().flatten().map(|d| &d.class)) {
        if !all.contains(c) {
            all.push(c.clone());
        }
    }
    all.sort();

    let mut per_class_ap = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for class in &all {
        let (ap, c) = evaluate_class(ground_truth, predictions, class, iou_threshold);
        if let Some(ap) = ap {
            per_class_ap.insert(class.clone(), ap);
        }
        counts.insert(class.clone(), c);
    }

    let map_score = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    let (tp, fp, fn_) = counts
        .values()
        .fold((0u64, 0u64, 0u64), |(a, b, c), k| (a + k.tp, b + k.fp, c + k.fn_));
    let denom = tp + fp + fn_;
    let accuracy = if denom == 0 { 0.0 } else { tp as f64 / denom as f64 };
    Ok(EvalReport {
        per_class_ap,
        map_score,
        accuracy,
        iou_threshold,
        counts,
    })
}

fn evaluate_class(
    ground_truth: &[Vec<LabeledBox>],
    predictions: &[Vec<Detection>],
    class: &DefectClass,
    iou_threshold: f64,
) -> (Option<f64>, ClassCounts) {
    let gts: Vec<Vec<&LabeledBox>> = ground_truth
        .iter()
        .map(|objs| objs.iter().filter(|o| &o.class == class).collect())
        .collect();
    let n_gt: u64 = gts.iter().map(|g| g.len() as u64).sum();

    // (image, detection), ranked by score desc, then image, box
    let mut ranked: Vec<(usize, &Detection)> = predictions
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| &d.class == class).map(move |d| (i, d)))
        .collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.score
            .total_cmp(&a.score)
            .then(ia.cmp(ib))
            .then_with(|| a.bbox.cmp(&b.bbox))
    });

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0u64;
    let mut precisions = Vec::with_capacity(ranked.len());
    let mut is_tp = Vec::with_capacity(ranked.len());
    for (rank, (img, det)) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts[*img].iter().enumerate() {
            if matched[*img][g] {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            matched[*img][g] = true;
            tp += 1;
            is_tp.push(true);
        } else {
            is_tp.push(false);
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
    }

    let counts = ClassCounts {
        tp,
        fp: ranked.len() as u64 - tp,
        fn_: n_gt - tp,
    };
    if n_gt == 0 {
        return (None, counts);
    }

    // All-points interpolation: precision at each rank becomes the max
    // precision at any later rank; AP sums it at every true positive.
    let mut running = 0.0f64;
    for p in precisions.iter_mut().rev() {
        running = running.max(*p);
        *p = running;
    }
    let total: f64 = precisions
        .iter()
        .zip(&is_tp)
        .filter(|(_, t)| **t)
        .map(|(p, _)| *p)
        .sum();
    (Some(total / n_gt as f64), counts)
}

/// Run `detector` over annotated frames and score it.
pub fn evaluate(
    detector: &dyn Detector,
    samples: &[(&AnnotatedImage, &Frame)],
    iou_threshold: f64,
) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    let gt: Vec<Vec<LabeledBox>> = samples.iter().map(|(a, _)| a.objects.clone()).collect();
    let preds: Vec<Vec<Detection>> = samples.iter().map(|(_, f)| detector.predict(f)).collect();
    evaluate_predictions(&gt, &preds, detector.classes(), iou_threshold)
}
