//! Offline frame analysis.
//!
//! Each frame goes through flatten, rainbow mask, frame score and region
//! proposals, then through the detector when a model is given. Nothing
//! here touches the network.

use std::path::{Path, PathBuf};

use chrono::{DateTime, SubsecRound, Utc};
use pipescan_core::detect::{predict_with_params, HistogramModel};
use pipescan_core::domain::{AnnotationSource, DefectAnnotation, Frame, PipelineParams};
use pipescan_core::imaging::pnm::decode_ppm;
use pipescan_core::imaging::{flatten, frame_rainbow_score, propose_regions, rainbow_mask, RegionProposal};
use pipescan_core::store::blob_id;
use serde::{Deserialize, Serialize};

use crate::{io_err, ClientError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub index: u32,
    /// File name inside the input directory.
    pub file: String,
    /// Content hash of the PPM bytes, as stored in a spool or on the server.
    pub blob: String,
    pub width: u32,
    pub height: u32,
    /// Mean absolute deviation left after flattening.
    pub flatten_mad: f64,
    pub rainbow_score: f64,
    pub alert: bool,
    pub proposals: Vec<RegionProposal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub params: PipelineParams,
    /// Content hash of the model file, when one was used.
    pub model: Option<String>,
    pub frames: Vec<FrameReport>,
    pub annotations: Vec<DefectAnnotation>,
}

impl AnalysisReport {
    /// One line per alerting frame.
    pub fn alert_lines(&self) -> Vec<String> {
        self.frames
            .iter()
            .filter(|f| f.alert)
            .map(|f| {
                format!(
                    "ALERT frame {} ({}): rainbow score {:.4} >= {}",
                    f.index, f.file, f.rainbow_score, self.params.rainbow_threshold
                )
            })
            .collect()
    }
}

/// What a run produced, with the frame bytes kept for staging.
#[derive(Debug, Clone)]
pub struct AnalysisRun {
    pub report: AnalysisReport,
    pub frame_bytes: Vec<Vec<u8>>,
    /// Newest frame modification time, whole seconds.
    pub newest_mtime: Option<DateTime<Utc>>,
}

/// Trailing run of digits in a file stem: `frame_0012` is 12.
fn frame_number(stem: &str) -> Option<u64> {
    let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect();
    if digits.is_empty() {
        return None;
    }
    digits.chars().rev().collect::<String>().parse().ok()
}

/// Numbered `*.ppm` files in `dir`, in frame-number order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut numbered = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if !path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let n = frame_number(stem)
            .ok_or_else(|| ClientError::Validation(format!("{}: frame file name has no number", path.display())))?;
        numbered.push((n, path));
    }
    numbered.sort();
    if let Some(w) = numbered.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(ClientError::Validation(format!(
            "{} and {} have the same frame number",
            w[0].1.display(),
            w[1].1.display()
        )));
    }
    if numbered.is_empty() {
        return Err(ClientError::Validation(format!("{}: no numbered .ppm frames", dir.display())));
    }
    Ok(numbered.into_iter().map(|(_, p)| p).collect())
}

pub fn load_params(path: &Path) -> Result<PipelineParams> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let params: PipelineParams = serde_json::from_str(&text)
        .map_err(|e| ClientError::Validation(format!("{}: bad params file: {e}", path.display())))?;
    if let Err(e) = params.validate() {
        return Err(ClientError::Validation(format!("{}: {e}", path.display())));
    }
    Ok(params)
}

/// Load and check a model file; returns the model and the file's hash.
pub fn load_model(path: &Path) -> Result<(HistogramModel, String)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| ClientError::Validation(format!("{}: model file is not UTF-8", path.display())))?;
    let model = HistogramModel::from_json(text)
        .map_err(|e| ClientError::Validation(format!("{}: bad model file: {e}", path.display())))?;
    Ok((model, blob_id(&bytes)))
}

fn analyze_frame(
    index: u32,
    path: &Path,
    bytes: &[u8],
    frame: &Frame,
    params: &PipelineParams,
    model: Option<&HistogramModel>,
    at: DateTime<Utc>,
) -> Result<(FrameReport, Vec<DefectAnnotation>)> {
    let imaging = |e: pipescan_core::imaging::ImagingError| ClientError::Validation(format!("{}: {e}", path.display()));
    let flat = flatten(frame, params.flattener_window).map_err(imaging)?;
    let mask = rainbow_mask(frame, params.flattener_window).map_err(imaging)?;
    let score = frame_rainbow_score(&mask).map_err(imaging)?;
    let proposals = propose_regions(&mask, params.rainbow_threshold, params.min_region_area).map_err(imaging)?;
    let annotations = match model {
        Some(m) => predict_with_params(m, frame, params)
            .map_err(imaging)?
            .into_iter()
            .map(|detection| DefectAnnotation {
                frame_index: index,
                detection,
                source: AnnotationSource::Automatic,
                params: *params,
                screenshot_ref: None,
                created_at: at,
            })
            .collect(),
        None => Vec::new(),
    };
    let report = FrameReport {
        index,
        file: path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
        blob: blob_id(bytes),
        width: frame.width,
        height: frame.height,
        flatten_mad: flat.mean_abs_deviation(),
        rainbow_score: score,
        alert: score >= params.rainbow_threshold,
        proposals,
    };
    Ok((report, annotations))
}

/// Analyze every frame in `input`.
///
/// `at` stamps the annotations; without it the newest frame modification
/// time is used, so repeated runs over the same files give the same output.
pub fn analyze_dir(
    input: &Path,
    params: &PipelineParams,
    model: Option<(&HistogramModel, &str)>,
    at: Option<DateTime<Utc>>,
) -> Result<AnalysisRun> {
    params.validate().map_err(|e| ClientError::Validation(e.to_string()))?;
    let paths = list_frames(input)?;
    let mut frame_bytes = Vec::with_capacity(paths.len());
    let mut frames = Vec::with_capacity(paths.len());
    let mut newest: Option<DateTime<Utc>> = None;
    for p in &paths {
        let bytes = std::fs::read(p).map_err(io_err(p))?;
        let frame = decode_ppm(&bytes).map_err(|e| ClientError::Validation(format!("{}: unreadable frame: {e}", p.display())))?;
        if let Ok(m) = std::fs::metadata(p).and_then(|m| m.modified()) {
            let t = DateTime::<Utc>::from(m).trunc_subsecs(0);
            newest = newest.max(Some(t));
        }
        frame_bytes.push(bytes);
        frames.push(frame);
    }
    let at = at.or(newest).unwrap_or(DateTime::UNIX_EPOCH);

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(paths.len());
    let chunk = paths.len().div_ceil(workers);
    let results: Vec<Result<(FrameReport, Vec<DefectAnnotation>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (paths, frame_bytes, frames) = (&paths, &frame_bytes, &frames);
                s.spawn(move || {
                    let lo = w * chunk;
                    let hi = (lo + chunk).min(paths.len());
                    (lo..hi)
                        .map(|i| analyze_frame(i as u32, &paths[i], &frame_bytes[i], &frames[i], params, model.map(|m| m.0), at))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("analysis worker panicked")).collect()
    });

    let mut report = AnalysisReport {
        params: *params,
        model: model.map(|m| m.1.to_string()),
        frames: Vec::with_capacity(results.len()),
        annotations: Vec::new(),
    };
    for r in results {
        let (frame, annotations) = r?;
        report.frames.push(frame);
        report.annotations.extend(annotations);
    }
    Ok(AnalysisRun {
        report,
        frame_bytes,
        newest_mtime: newest,
    })
}
