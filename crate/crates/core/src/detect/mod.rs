//! Detection: the pluggable detector seam, a trainable color-histogram
//! model, greedy non-maximum suppression and detector evaluation.

mod eval;
mod histogram;

use std::cmp::Ordering;

pub use eval::{evaluate, evaluate_predictions, ClassCounts, EvalError, EvalReport, DEFAULT_IOU_THRESHOLD};
pub use histogram::{
    color_histogram, predict_with_model, predict_with_params, train_histogram_model, HistogramModel,
    TrainError, HISTOGRAM_BINS, MODEL_FORMAT_VERSION,
};

use crate::domain::{BoundingBox, DefectClass, Detection, Frame};

/// Anything that turns a frame into class-labeled boxes.
///
/// Implementations must only emit classes from [`Detector::classes`] and
/// scores in `[0,1]`.
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;
    fn classes(&self) -> &[DefectClass];
    fn predict(&self, frame: &Frame) -> Vec<Detection>;
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Total order used wherever detections are ranked: score descending, then
/// box lexicographic, then class name.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.cmp(&b.bbox))
        .then_with(|| a.class.cmp(&b.class))
}

/// Greedy per-class non-maximum suppression.
///
/// A detection survives iff its IoU with every already kept detection of the
/// same class is below `iou_threshold`. Output is in rank order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou(&k.bbox, &d.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: u32, y0: u32, x1: u32, y1: u32) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(b: BoundingBox, class: &str, score: f64) -> Detection {
        Detection::new(b, DefectClass::new(class).unwrap(), score).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = bx(0, 0, 2, 2);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5, 5, 6, 6)), 0.0);
        assert_eq!(iou(&a, &bx(2, 0, 4, 2)), 0.0);
        assert_eq!(iou(&a, &bx(1, 1, 3, 3)), 1.0 / 7.0);
    }

    #[test]
    fn nms_cases() {
        let one = vec![det(bx(0, 0, 4, 4), "a", 0.3)];
        assert_eq!(nms(&one, 0.5), one);

        let pair = vec![det(bx(0, 0, 4, 4), "a", 0.8), det(bx(0, 0, 4, 4), "a", 0.9)];
        let out = nms(&pair, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);

        // different classes never suppress each other
        let mixed = vec![det(bx(0, 0, 4, 4), "a", 0.8), det(bx(0, 0, 4, 4), "b", 0.9)];
        assert_eq!(nms(&mixed, 0.5).len(), 2);
    }

    /// Greedy suppression re-simulated from its definition: walk the ranked
    /// list and, for each candidate, rescan every earlier kept element.
    fn oracle_nms(input: &[Detection], threshold: f64) -> Vec<Detection> {
        let n = input.len();
        let mut order: Vec<usize> = (0..n).collect();
        // selection sort by rank, independent of slice::sort
        for i in 0..n {
            let mut best = i;
            for j in i + 1..n {
                if rank_order(&input[order[j]], &input[order[best]]) == Ordering::Less {
                    best = j;
                }
            }
            order.swap(i, best);
        }
        let mut keep = vec![false; n];
        for (pos, &i) in order.iter().enumerate() {
            keep[pos] = order[..pos].iter().enumerate().all(|(p2, &j)| {
                !keep[p2] || input[j].class != input[i].class || {
                    let a = &input[i].bbox;
                    let b = &input[j].bbox;
                    let ix = a.x_max.min(b.x_max).saturating_sub(a.x_min.max(b.x_min)) as f64;
                    let iy = a.y_max.min(b.y_max).saturating_sub(a.y_min.max(b.y_min)) as f64;
                    let inter = ix * iy;
                    inter / (a.area() as f64 + b.area() as f64 - inter) < threshold
                }
            });
        }
        order
            .iter()
            .enumerate()
            .filter(|(p, _)| keep[*p])
            .map(|(_, &i)| input[i].clone())
            .collect()
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0u32..12, 0u32..12, 1u32..8, 1u32..8).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    fn arb_det() -> impl Strategy<Value = Detection> {
        (arb_box(), prop_oneof![Just("a"), Just("b")], 0u32..=10)
            .prop_map(|(b, c, s)| det(b, c, s as f64 / 10.0))
    }

    proptest! {
        #[test]
        fn iou_properties(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn nms_matches_resimulation(dets in proptest::collection::vec(arb_det(), 0..=8), t in 0u32..=10) {
            let t = t as f64 / 10.0;
            prop_assert_eq!(nms(&dets, t), oracle_nms(&dets, t));
        }

        #[test]
        fn nms_is_idempotent_subsequence(dets in proptest::collection::vec(arb_det(), 0..=12), t in 0.0f64..=1.0) {
            let once = nms(&dets, t);
            prop_assert_eq!(nms(&once, t), once.clone());
            let mut sorted = dets.clone();
            sorted.sort_by(rank_order);
            let mut it = sorted.iter();
            for d in &once {
                prop_assert!(it.any(|s| s == d));
            }
        }
    }
}
