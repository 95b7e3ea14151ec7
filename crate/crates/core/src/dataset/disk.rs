//! Dataset directory layout:
//!
//! ```text
//! <dir>/dataset.json          manifest: id, name, classes, images, split, provenance
//! <dir>/images/<stem>.ppm     binary PPM pixels
//! <dir>/annotations/<stem>.xml  VOC annotation for the image with the same stem
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{parse_voc, write_voc, Dataset, ProvenanceRecord, Split, VocError};
use crate::domain::{to_canonical_vec, DefectClass, Frame};
use crate::imaging::pnm::{decode_ppm, encode_ppm, PnmError};

#[derive(Debug, Error)]
pub enum DiskError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Voc { path: String, source: VocError },
    #[error("{path}: {source}")]
    Image { path: String, source: PnmError },
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageEntry {
    stem: String,
    image_ref: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    id: String,
    name: String,
    classes: Vec<DefectClass>,
    images: Vec<ImageEntry>,
    split: Option<Split>,
    provenance: Vec<ProvenanceRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DiskError + '_ {
    move |source| DiskError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `dataset` and its pixels (`frames[i]` for `dataset.images[i]`).
pub fn save_dataset_dir(dataset: &Dataset, frames: &[Frame], dir: &Path) -> Result<(), DiskError> {
    if frames.len() != dataset.images.len() {
        return Err(DiskError::Manifest(format!(
            "{} frames for {} images",
            frames.len(),
            dataset.images.len()
        )));
    }
    let images_dir = dir.join("images");
    let ann_dir = dir.join("annotations");
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    fs::create_dir_all(&ann_dir).map_err(io_err(&ann_dir))?;
    let mut entries = Vec::new();
    for (i, (img, frame)) in dataset.images.iter().zip(frames).enumerate() {
        let stem = format!("{i:05}");
        let ppm = images_dir.join(format!("{stem}.ppm"));
        fs::write(&ppm, encode_ppm(frame)).map_err(io_err(&ppm))?;
        let xml = ann_dir.join(format!("{stem}.xml"));
        fs::write(&xml, write_voc(img, &format!("{stem}.ppm"))).map_err(io_err(&xml))?;
        entries.push(ImageEntry {
            stem,
            image_ref: img.image_ref.clone(),
        });
    }
    let manifest = Manifest {
        id: dataset.id.clone(),
        name: dataset.name.clone(),
        classes: dataset.classes.clone(),
        images: entries,
        split: dataset.split.clone(),
        provenance: dataset.provenance.clone(),
    };
    let path = dir.join("dataset.json");
    let bytes = to_canonical_vec(&manifest).map_err(|e| DiskError::Manifest(e.to_string()))?;
    fs::write(&path, bytes).map_err(io_err(&path))
}

/// Read a dataset directory back with its pixels.
pub fn load_dataset_dir(dir: &Path) -> Result<(Dataset, Vec<Frame>), DiskError> {
    let path = dir.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DiskError::Manifest(e.to_string()))?;
    let mut images = Vec::new();
    let mut frames = Vec::new();
    for entry in &manifest.images {
        if entry.stem.contains(['/', '\\']) || entry.stem.starts_with('.') {
            return Err(DiskError::Manifest(format!("bad stem {:?}", entry.stem)));
        }
        let xml_path = dir.join("annotations").join(format!("{}.xml", entry.stem));
        let xml = fs::read_to_string(&xml_path).map_err(io_err(&xml_path))?;
        let mut img = parse_voc(&xml).map_err(|source| DiskError::Voc {
            path: xml_path.display().to_string(),
            source,
        })?;
        let ppm_path = dir.join("images").join(format!("{}.ppm", entry.stem));
        let bytes = fs::read(&ppm_path).map_err(io_err(&ppm_path))?;
        let frame = decode_ppm(&bytes).map_err(|source| DiskError::Image {
            path: ppm_path.display().to_string(),
            source,
        })?;
        if (frame.width, frame.height) != (img.width, img.height) {
            return Err(DiskError::Manifest(format!(
                "{}: annotation size {}x{} does not match image {}x{}",
                entry.stem, img.width, img.height, frame.width, frame.height
            )));
        }
        img.image_ref = entry.image_ref.clone();
        images.push(img);
        frames.push(frame);
    }
    let dataset = Dataset {
        id: manifest.id,
        name: manifest.name,
        classes: manifest.classes,
        images,
        split: manifest.split,
        provenance: manifest.provenance,
    };
    let problems = dataset.problems();
    if !problems.is_empty() {
        return Err(DiskError::Manifest(problems.join("; ")));
    }
    Ok((dataset, frames))
}
