//! Scriptable re-annotation of a downloaded bundle.
//!
//! A bundle directory holds:
//!
//! | file | content |
//! |---|---|
//! | `original.json` | the bundle response exactly as downloaded |
//! | `working.json` | the same document with local edits applied |
//! | `pending.json` | the list saved for upload, with the revision it was based on |
//! | `params.json` | parameters snapshotted into new manual defects |
//! | `classes.json` | classes accepted by `add-defect`; empty accepts any |
//! | `frames/` | frame blobs as `NNNN.ppm` |
//!
//! Edits only touch `working.json` until they are saved.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use pipescan_core::domain::{
    bundle_hash, to_canonical_vec, AnnotationSource, BoundingBox, DefectAnnotation, DefectClass, Detection, PipelineParams,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::remote::Remote;
use crate::{io_err, write_atomic, ClientError, Result};

const ORIGINAL: &str = "original.json";
const WORKING: &str = "working.json";
const PENDING: &str = "pending.json";
const PARAMS: &str = "params.json";
const CLASSES: &str = "classes.json";
const FRAMES: &str = "frames";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pending {
    pub inspection_id: String,
    pub expected_revision: u64,
    pub annotations: Vec<DefectAnnotation>,
}

/// An opened bundle directory.
#[derive(Debug, Clone)]
pub struct Review {
    dir: PathBuf,
    working: Value,
    pub params: PipelineParams,
    pub classes: Vec<DefectClass>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?)
        .map_err(|e| ClientError::Validation(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_atomic(path, &to_canonical_vec(v).expect("JSON values serialize"))
}

/// Download an inspection into `dir`, replacing any earlier download.
///
/// `classes` seeds the class list; classes already used by the bundle are
/// added to it. `params` defaults to the pipeline defaults.
pub fn download(remote: &Remote, id: &str, dir: &Path, classes: &[String], params: Option<PipelineParams>) -> Result<Review> {
    let b = remote.bundle(id)?;
    let frames_dir = dir.join(FRAMES);
    std::fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    for (i, r) in b.bundle["frame_refs"].as_array().into_iter().flatten().enumerate() {
        let r = r.as_str().unwrap_or_default();
        let bytes = remote.get_blob(r)?;
        write_atomic(&frames_dir.join(format!("{i:04}.ppm")), &bytes)?;
    }
    let mut names: Vec<String> = classes.to_vec();
    for a in b.bundle["annotations"].as_array().into_iter().flatten() {
        if let Some(c) = a["detection"]["class"].as_str() {
            if !names.iter().any(|n| n == c) {
                names.push(c.to_string());
            }
        }
    }
    let classes = names
        .into_iter()
        .map(DefectClass::new)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ClientError::Validation(e.to_string()))?;
    write_json(&dir.join(CLASSES), &classes)?;
    write_json(&dir.join(PARAMS), &params.unwrap_or_default())?;
    write_atomic(&dir.join(ORIGINAL), &b.raw)?;
    write_atomic(&dir.join(WORKING), &b.raw)?;
    let pending = dir.join(PENDING);
    if pending.exists() {
        std::fs::remove_file(&pending).map_err(io_err(&pending))?;
    }
    Review::open(dir)
}

impl Review {
    pub fn open(dir: &Path) -> Result<Self> {
        let working: Value = parse(&dir.join(WORKING))?;
        if !working["bundle"].is_object() {
            return Err(ClientError::Validation(format!("{}: not a bundle directory", dir.display())));
        }
        let params: PipelineParams = parse(&dir.join(PARAMS))?;
        params
            .validate()
            .map_err(|e| ClientError::Validation(format!("{}: {e}", dir.join(PARAMS).display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            working,
            params,
            classes: parse(&dir.join(CLASSES))?,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn inspection_id(&self) -> &str {
        self.working["bundle"]["id"].as_str().unwrap_or_default()
    }

    pub fn revision(&self) -> u64 {
        self.working["revision"].as_u64().unwrap_or_default()
    }

    pub fn frame_count(&self) -> usize {
        self.working["bundle"]["frame_refs"].as_array().map_or(0, Vec::len)
    }

    pub fn annotations(&self) -> Result<Vec<DefectAnnotation>> {
        serde_json::from_value(self.working["bundle"]["annotations"].clone())
            .map_err(|e| ClientError::Validation(format!("{}: bad annotations: {e}", self.dir.join(WORKING).display())))
    }

    fn set_annotations(&mut self, list: &[DefectAnnotation]) -> Result<()> {
        let bundle = &mut self.working["bundle"];
        bundle["annotations"] = serde_json::to_value(list).expect("annotations serialize");
        let hash = bundle_hash(bundle);
        self.working["bundle_hash"] = Value::String(hash);
        write_json(&self.dir.join(WORKING), &self.working)
    }

    /// Tag a manual defect on `frame` with the current params snapshot.
    pub fn add_defect(&mut self, frame: u32, class: &str, bbox: BoundingBox, score: f64, at: DateTime<Utc>) -> Result<usize> {
        let frames = self.frame_count();
        if frame as usize >= frames {
            return Err(ClientError::Validation(format!("frame {frame} out of range: bundle has {frames} frames")));
        }
        let class = DefectClass::new(class).map_err(|e| ClientError::Validation(e.to_string()))?;
        if !self.classes.is_empty() && !self.classes.contains(&class) {
            let known: Vec<&str> = self.classes.iter().map(DefectClass::as_str).collect();
            return Err(ClientError::Validation(format!("unknown class {class:?}; expected one of {known:?}")));
        }
        if !bbox.is_valid() {
            return Err(ClientError::Validation("empty bounding box".into()));
        }
        let detection = Detection::new(bbox, class, score).map_err(|e| ClientError::Validation(e.to_string()))?;
        let mut list = self.annotations()?;
        list.push(DefectAnnotation {
            frame_index: frame,
            detection,
            source: AnnotationSource::Manual,
            params: self.params,
            screenshot_ref: None,
            created_at: at,
        });
        self.set_annotations(&list)?;
        Ok(list.len() - 1)
    }

    /// Remove one defect, manual or automatic.
    pub fn delete_defect(&mut self, index: usize) -> Result<DefectAnnotation> {
        let mut list = self.annotations()?;
        if index >= list.len() {
            return Err(ClientError::Validation(format!("defect {index} out of range: {} defects", list.len())));
        }
        let removed = list.remove(index);
        self.set_annotations(&list)?;
        Ok(removed)
    }

    /// Make the params snapshot of defect `index` current for new defects.
    pub fn use_params_of(&mut self, index: usize) -> Result<PipelineParams> {
        let list = self.annotations()?;
        let a = list
            .get(index)
            .ok_or_else(|| ClientError::Validation(format!("defect {index} out of range: {} defects", list.len())))?;
        self.params = a.params;
        write_json(&self.dir.join(PARAMS), &self.params)?;
        Ok(self.params)
    }

    /// Record the working list for upload.
    pub fn save(&self) -> Result<Pending> {
        let p = Pending {
            inspection_id: self.inspection_id().to_string(),
            expected_revision: self.revision(),
            annotations: self.annotations()?,
        };
        write_json(&self.dir.join(PENDING), &p)?;
        Ok(p)
    }

    pub fn pending(&self) -> Result<Option<Pending>> {
        let path = self.dir.join(PENDING);
        if !path.exists() {
            return Ok(None);
        }
        parse(&path).map(Some)
    }

    /// Drop every local edit: the working copy becomes the downloaded bytes.
    pub fn restore_original(&mut self) -> Result<()> {
        let original = read(&self.dir.join(ORIGINAL))?;
        write_atomic(&self.dir.join(WORKING), &original)?;
        let pending = self.dir.join(PENDING);
        if pending.exists() {
            std::fs::remove_file(&pending).map_err(io_err(&pending))?;
        }
        *self = Review::open(&self.dir)?;
        Ok(())
    }

    /// Upload the saved list, then download the server copy afresh.
    ///
    /// A server that moved on since the download answers `409`; the local
    /// files are left untouched in that case.
    pub fn upload(&mut self, remote: &Remote) -> Result<u64> {
        let p = self
            .pending()?
            .ok_or_else(|| ClientError::Validation("nothing saved: run save first".into()))?;
        remote.put_defects(&p.inspection_id, &p.annotations, Some(p.expected_revision))?;
        let classes: Vec<String> = self.classes.iter().map(|c| c.to_string()).collect();
        *self = download(remote, &p.inspection_id, &self.dir, &classes, Some(self.params))?;
        Ok(self.revision())
    }
}
