//! Labeled image datasets: VOC annotation files, augmentation and
//! reproducible train/test splits.

mod augment;
pub mod disk;
mod rng;
mod voc;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment, AugmentOp, AugmentationSpec};
pub use rng::XorShift64Star;
pub use voc::{parse_voc, write_voc, VocError};

use crate::domain::{DefectClass, LabeledBox};

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("split leaves an empty side for class {0}")]
    EmptySide(String),
    #[error("image {index} has no objects, so it has no dominant class")]
    NoDominantClass { index: usize },
    #[error("dataset invalid: {0}")]
    Invalid(String),
}

/// One image with its labeled boxes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub objects: Vec<LabeledBox>,
}

impl AnnotatedImage {
    pub fn boxes_in_bounds(&self) -> bool {
        self.objects
            .iter()
            .all(|o| o.bbox.is_valid() && o.bbox.fits_within(self.width, self.height))
    }

    /// The class with the most objects, ties broken by class name.
    pub fn dominant_class(&self) -> Option<&DefectClass> {
        let mut counts: BTreeMap<&DefectClass, usize> = BTreeMap::new();
        for o in &self.objects {
            *counts.entry(&o.class).or_default() += 1;
        }
        // BTreeMap iterates names ascending; keep the first maximum.
        let mut best: Option<(&DefectClass, usize)> = None;
        for (c, n) in counts {
            if best.is_none_or(|(_, bn)| n > bn) {
                best = Some((c, n));
            }
        }
        best.map(|(c, _)| c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Where an image came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    /// Index of the produced image.
    pub image: usize,
    /// Index of the image it was derived from.
    pub source: usize,
    pub op: AugmentOp,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub id: String,
    pub name: String,
    pub classes: Vec<DefectClass>,
    #[serde(default)]
    pub images: Vec<AnnotatedImage>,
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default)]
    pub provenance: Vec<ProvenanceRecord>,
}

impl Dataset {
    pub fn new(id: impl Into<String>, name: impl Into<String>, classes: Vec<DefectClass>) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            classes,
            images: Vec::new(),
            split: None,
            provenance: Vec::new(),
        }
    }

    /// Structural problems, empty when the dataset is consistent.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, img) in self.images.iter().enumerate() {
            if !img.boxes_in_bounds() {
                out.push(format!("image {i}: box outside image bounds"));
            }
            for o in &img.objects {
                if !self.classes.contains(&o.class) {
                    out.push(format!("image {i}: unknown class {}", o.class));
                }
            }
        }
        if let Some(split) = &self.split {
            let mut seen = vec![0u8; self.images.len()];
            for &i in split.train.iter().chain(&split.test) {
                match seen.get_mut(i) {
                    Some(s) => *s += 1,
                    None => out.push(format!("split index {i} out of range")),
                }
            }
            if seen.iter().any(|s| *s != 1) {
                out.push("split is not a partition of the images".into());
            }
        }
        out
    }

    pub fn train_images(&self) -> Vec<&AnnotatedImage> {
        self.split
            .as_ref()
            .map(|s| s.train.iter().map(|&i| &self.images[i]).collect())
            .unwrap_or_default()
    }

    pub fn test_images(&self) -> Vec<&AnnotatedImage> {
        self.split
            .as_ref()
            .map(|s| s.test.iter().map(|&i| &self.images[i]).collect())
            .unwrap_or_default()
    }
}

fn round_half_away(x: f64) -> usize {
    x.round() as usize
}

fn split_group(
    indices: &mut [usize],
    fraction: f64,
    rng: &mut XorShift64Star,
    label: &str,
) -> Result<(Vec<usize>, Vec<usize>), DatasetError> {
    rng.shuffle(indices);
    let n_train = round_half_away(fraction * indices.len() as f64);
    if n_train == 0 || n_train == indices.len() {
        return Err(DatasetError::EmptySide(label.to_string()));
    }
    Ok((indices[..n_train].to_vec(), indices[n_train..].to_vec()))
}

/// Partition the images into train and test sets.
///
/// Stratified splitting groups images by dominant class (in the order of
/// `dataset.classes`), shuffles each group with one generator seeded from
/// `seed`, and sends `round(train_fraction * group_len)` of each to train.
/// Index lists in the result are sorted ascending.
pub fn split_dataset(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<Dataset, DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::Parameter(format!(
            "train_fraction {train_fraction} must be in (0,1)"
        )));
    }
    let mut rng = XorShift64Star::seed_from(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    if stratified {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes.len()];
        for (i, img) in dataset.images.iter().enumerate() {
            let c = img
                .dominant_class()
                .ok_or(DatasetError::NoDominantClass { index: i })?;
            let g = dataset
                .classes
                .iter()
                .position(|k| k == c)
                .ok_or_else(|| DatasetError::Invalid(format!("image {i}: unknown class {c}")))?;
            groups[g].push(i);
        }
        for (class, mut idx) in dataset.classes.iter().zip(groups) {
            let (a, b) = split_group(&mut idx, train_fraction, &mut rng, class.as_str())?;
            train.extend(a);
            test.extend(b);
        }
    } else {
        let mut idx: Vec<usize> = (0..dataset.images.len()).collect();
        let (a, b) = split_group(&mut idx, train_fraction, &mut rng, "<all images>")?;
        train = a;
        test = b;
    }
    train.sort_unstable();
    test.sort_unstable();
    let mut out = dataset.clone();
    out.split = Some(Split { train, test });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::BoundingBox;
    use proptest::prelude::*;

    fn class(n: &str) -> DefectClass {
        DefectClass::new(n).unwrap()
    }

    pub(crate) fn synthetic(per_class: &[usize]) -> Dataset {
        let names = ["Junction", "Misaligned Junction", "Crack"];
        let classes: Vec<_> = names[..per_class.len()].iter().map(|n| class(n)).collect();
        let mut ds = Dataset::new("ds", "synthetic", classes.clone());
        for (c, &n) in per_class.iter().enumerate() {
            for k in 0..n {
                ds.images.push(AnnotatedImage {
                    image_ref: format!("{c}-{k}"),
                    width: 32,
                    height: 32,
                    objects: vec![LabeledBox {
                        class: classes[c].clone(),
                        bbox: BoundingBox::new(1, 1, 10, 10).unwrap(),
                    }],
                });
            }
        }
        ds
    }

    fn per_class(ds: &Dataset, idx: &[usize]) -> Vec<usize> {
        ds.classes
            .iter()
            .map(|c| idx.iter().filter(|&&i| ds.images[i].dominant_class() == Some(c)).count())
            .collect()
    }

    #[test]
    fn split_counts_720() {
        let ds = split_dataset(&synthetic(&[360, 360]), 0.9, 7, true).unwrap();
        let s = ds.split.as_ref().unwrap();
        assert_eq!((s.train.len(), s.test.len()), (648, 72));
        assert_eq!(per_class(&ds, &s.train), vec![324, 324]);
        assert_eq!(per_class(&ds, &s.test), vec![36, 36]);
    }

    #[test]
    fn split_counts_22() {
        let ds = split_dataset(&synthetic(&[11, 11]), 9.0 / 11.0, 7, true).unwrap();
        let s = ds.split.as_ref().unwrap();
        assert_eq!((s.train.len(), s.test.len()), (18, 4));
        assert_eq!(per_class(&ds, &s.train), vec![9, 9]);
        assert_eq!(per_class(&ds, &s.test), vec![2, 2]);
    }

    #[test]
    fn same_seed_same_split() {
        let base = synthetic(&[20, 13]);
        assert_eq!(split_dataset(&base, 0.7, 99, true), split_dataset(&base, 0.7, 99, true));
        assert_eq!(split_dataset(&base, 0.7, 99, false), split_dataset(&base, 0.7, 99, false));
    }

    #[test]
    fn different_seeds_differ() {
        let base = synthetic(&[10, 10]);
        let reference = split_dataset(&base, 0.5, 0, false).unwrap().split;
        let differs = (1..=5).any(|s| split_dataset(&base, 0.5, s, false).unwrap().split != reference);
        assert!(differs);
    }

    #[test]
    fn empty_side_names_the_class() {
        let err = split_dataset(&synthetic(&[10, 1]), 0.9, 1, true).unwrap_err();
        assert_eq!(err, DatasetError::EmptySide("Misaligned Junction".into()));
        assert!(split_dataset(&synthetic(&[10]), 1.0, 1, true).is_err());
        assert!(split_dataset(&synthetic(&[10]), 0.0, 1, true).is_err());
    }

    #[test]
    fn images_without_objects_cannot_stratify() {
        let mut ds = synthetic(&[4, 4]);
        ds.images[3].objects.clear();
        assert_eq!(split_dataset(&ds, 0.5, 1, true), Err(DatasetError::NoDominantClass { index: 3 }));
        assert!(split_dataset(&ds, 0.5, 1, false).is_ok());
    }

    #[test]
    fn dominant_class_ties_by_name() {
        let b = BoundingBox::new(0, 0, 1, 1).unwrap();
        let img = AnnotatedImage {
            image_ref: "x".into(),
            width: 4,
            height: 4,
            objects: vec![
                LabeledBox { class: class("b"), bbox: b },
                LabeledBox { class: class("a"), bbox: b },
                LabeledBox { class: class("c"), bbox: b },
                LabeledBox { class: class("c"), bbox: b },
                LabeledBox { class: class("b"), bbox: b },
            ],
        };
        assert_eq!(img.dominant_class().unwrap().as_str(), "b");
    }

    proptest! {
        #[test]
        fn split_is_a_partition(a in 2usize..40, b in 2usize..40, f in 0.05f64..0.95, seed in any::<u64>()) {
            let base = synthetic(&[a, b]);
            match split_dataset(&base, f, seed, true) {
                Ok(ds) => {
                    prop_assert!(ds.problems().is_empty());
                    let s = ds.split.as_ref().unwrap();
                    let train = per_class(&ds, &s.train);
                    for (n, t) in [a, b].iter().zip(train) {
                        prop_assert!((t as f64 - f * *n as f64).abs() <= 0.5 + 1e-9);
                    }
                }
                Err(DatasetError::EmptySide(_)) => {}
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
