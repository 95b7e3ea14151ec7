//! Shared vocabulary types.
//!
//! Everything here is a plain immutable value. Constructors validate; the
//! fields stay public so that stores and wire decoders can build values
//! directly, and [`validate_inspection`] reports anything that slipped
//! through.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Error raised by validating constructors.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid {what}: {reason}")]
pub struct DomainError {
    pub what: &'static str,
    pub reason: String,
}

impl DomainError {
    fn new(what: &'static str, reason: impl Into<String>) -> Self {
        Self {
            what,
            reason: reason.into(),
        }
    }
}

/// Encode any serializable value as canonical JSON: sorted object keys, no
/// insignificant whitespace.
pub fn to_canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    // serde_json::Value maps are BTreeMaps, so going through Value sorts keys.
    let value = serde_json::to_value(value)?;
    serde_json::to_string(&value)
}

/// Canonical JSON as bytes.
pub fn to_canonical_vec<T: Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    to_canonical_json(value).map(String::into_bytes)
}

/// An RGB frame, 8 bits per channel, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[u8; 3]>,
}

impl Frame {
    pub fn new(width: u32, height: u32, pixels: Vec<[u8; 3]>) -> Result<Self, DomainError> {
        if width == 0 || height == 0 {
            return Err(DomainError::new("frame", "dimensions must be positive"));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(DomainError::new(
                "frame",
                format!(
                    "expected {} pixels for {}x{}, got {}",
                    width as usize * height as usize,
                    width,
                    height,
                    pixels.len()
                ),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// A frame filled with one color.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, DomainError> {
        Self::new(width, height, vec![rgb; width as usize * height as usize])
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = rgb;
    }

    /// Copy out the pixels covered by `bbox`. The box must lie inside the frame.
    pub fn crop(&self, bbox: &BoundingBox) -> Frame {
        let mut pixels = Vec::with_capacity(bbox.area() as usize);
        for y in bbox.y_min..bbox.y_max {
            for x in bbox.x_min..bbox.x_max {
                pixels.push(self.get(x, y));
            }
        }
        Frame {
            width: bbox.width(),
            height: bbox.height(),
            pixels,
        }
    }

    pub fn contains_box(&self, bbox: &BoundingBox) -> bool {
        bbox.x_max <= self.width && bbox.y_max <= self.height
    }
}

/// Axis-aligned box, min-inclusive and max-exclusive, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, DomainError> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(DomainError::new(
                "bounding box",
                format!("({x_min},{y_min},{x_max},{y_max}) is empty"),
            ))
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    /// Area shared with `other`; 0 when disjoint.
    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let x0 = self.x_min.max(other.x_min);
        let y0 = self.y_min.max(other.y_min);
        let x1 = self.x_max.min(other.x_max);
        let y1 = self.y_max.min(other.y_max);
        if x0 >= x1 || y0 >= y1 {
            0
        } else {
            (x1 - x0) as u64 * (y1 - y0) as u64
        }
    }
}

/// A defect class label such as `"Junction"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DefectClass(String);

impl DefectClass {
    pub fn new(name: impl Into<String>) -> Result<Self, DomainError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(DomainError::new("defect class", "name must be non-empty"));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DefectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Parse a list of class names, rejecting empties and duplicates.
pub fn class_set<I, S>(names: I) -> Result<Vec<DefectClass>, DomainError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut out: Vec<DefectClass> = Vec::new();
    for name in names {
        let class = DefectClass::new(name)?;
        if out.contains(&class) {
            return Err(DomainError::new(
                "class set",
                format!("duplicate class {class}"),
            ));
        }
        out.push(class);
    }
    if out.is_empty() {
        return Err(DomainError::new("class set", "at least one class required"));
    }
    Ok(out)
}

/// A single detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class: DefectClass,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, class: DefectClass, score: f64) -> Result<Self, DomainError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(DomainError::new("detection", format!("score {score} out of [0,1]")));
        }
        Ok(Self { bbox, class, score })
    }
}

/// A class-labeled ground-truth box.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledBox {
    pub class: DefectClass,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// Tunable parameters of the frame pipeline. Snapshotted into every
/// annotation so a reviewer can restore them later.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub flattener_window: u32,
    pub rainbow_threshold: f64,
    pub min_region_area: u64,
    pub nms_iou_threshold: f64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            flattener_window: 15,
            rainbow_threshold: 0.5,
            min_region_area: 25,
            nms_iou_threshold: 0.5,
        }
    }
}

impl PipelineParams {
    /// Field-level problems, empty when valid.
    pub fn problems(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.flattener_window == 0 || self.flattener_window % 2 == 0 {
            out.push("flattener_window must be odd and >= 1");
        }
        if !(0.0..=1.0).contains(&self.rainbow_threshold) {
            out.push("rainbow_threshold out of [0,1]");
        }
        if self.min_region_area == 0 {
            out.push("min_region_area must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.nms_iou_threshold) {
            out.push("nms_iou_threshold out of [0,1]");
        }
        out
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        match self.problems().first() {
            None => Ok(()),
            Some(p) => Err(DomainError::new("pipeline params", *p)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    Manual,
    Automatic,
}

/// One tagged or detected defect on one frame of an inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectAnnotation {
    pub frame_index: u32,
    pub detection: Detection,
    pub source: AnnotationSource,
    pub params: PipelineParams,
    #[serde(default)]
    pub screenshot_ref: Option<String>,
    pub created_at: DateTime<Utc>,
}

/// One recorded survey: the unit of work of the platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inspection {
    pub id: String,
    pub title: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub frame_refs: Vec<String>,
    #[serde(default)]
    pub depth_ref: Option<String>,
    #[serde(default)]
    pub annotations: Vec<DefectAnnotation>,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub locked: bool,
    #[serde(default)]
    pub revision: u64,
}

impl Inspection {
    pub fn new(id: impl Into<String>, title: impl Into<String>, created_at: DateTime<Utc>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            created_at,
            frame_refs: Vec::new(),
            depth_ref: None,
            annotations: Vec::new(),
            tags: Vec::new(),
            locked: false,
            revision: 0,
        }
    }

    /// The content clients download and compare: everything but the
    /// revision and lock state.
    pub fn bundle(&self) -> serde_json::Value {
        serde_json::json!({
            "id": self.id,
            "title": self.title,
            "created_at": self.created_at,
            "frame_refs": self.frame_refs,
            "depth_ref": self.depth_ref,
            "annotations": self.annotations,
            "tags": self.tags,
        })
    }

    /// SHA-256 hex of the canonical bundle bytes.
    pub fn bundle_hash(&self) -> String {
        bundle_hash(&self.bundle())
    }
}

/// SHA-256 hex of a bundle value in canonical form.
pub fn bundle_hash(bundle: &serde_json::Value) -> String {
    crate::store::blob_id(&to_canonical_vec(bundle).expect("JSON values serialize"))
}

/// A single broken invariant found by [`validate_inspection`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Where the problem is, e.g. `annotations[2]`.
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

/// Check every locally checkable invariant of an inspection. Returns one
/// entry per violation; an empty list means the value is well formed.
pub fn validate_inspection(inspection: &Inspection) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |subject: String, message: &str| {
        out.push(Violation {
            subject,
            message: message.to_string(),
        })
    };

    if inspection.id.trim().is_empty() {
        push("id".into(), "id must be non-empty");
    }
    for (i, r) in inspection.frame_refs.iter().enumerate() {
        if r.is_empty() {
            push(format!("frame_refs[{i}]"), "empty blob id");
        }
    }
    let mut seen_tags = std::collections::HashSet::new();
    for (i, t) in inspection.tags.iter().enumerate() {
        if t.trim().is_empty() {
            push(format!("tags[{i}]"), "empty tag");
        } else if !seen_tags.insert(t.as_str()) {
            push(format!("tags[{i}]"), "duplicate tag");
        }
    }

    let frame_count = inspection.frame_refs.len() as u64;
    for (i, a) in inspection.annotations.iter().enumerate() {
        let subject = format!("annotations[{i}]");
        if a.frame_index as u64 >= frame_count {
            push(subject.clone(), "frame_index out of range");
        }
        let d = &a.detection;
        if !(0.0..=1.0).contains(&d.score) {
            push(subject.clone(), "score out of [0,1]");
        }
        if !d.bbox.is_valid() {
            push(subject.clone(), "empty bounding box");
        }
        if d.class.as_str().trim().is_empty() {
            push(subject.clone(), "empty class name");
        }
        for p in a.params.problems() {
            push(subject.clone(), p);
        }
        if let Some(s) = &a.screenshot_ref {
            if s.is_empty() {
                push(subject.clone(), "empty screenshot ref");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn ts() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 3, 1, 12, 0, 0).unwrap()
    }

    fn annotation(frame: u32) -> DefectAnnotation {
        DefectAnnotation {
            frame_index: frame,
            detection: Detection::new(
                BoundingBox::new(1, 2, 10, 12).unwrap(),
                DefectClass::new("Junction").unwrap(),
                0.75,
            )
            .unwrap(),
            source: AnnotationSource::Automatic,
            params: PipelineParams::default(),
            screenshot_ref: None,
            created_at: ts(),
        }
    }

    fn valid() -> Inspection {
        let mut i = Inspection::new("insp-1", "north line", ts());
        i.frame_refs = vec!["a".into(), "b".into(), "c".into()];
        i.annotations = vec![annotation(0), annotation(2)];
        i.tags = vec!["pe100".into()];
        i
    }

    #[test]
    fn well_formed_inspection_has_no_violations() {
        assert_eq!(validate_inspection(&valid()), vec![]);
    }

    #[test]
    fn frame_index_equal_to_count_is_out_of_range() {
        let mut i = valid();
        i.annotations[1].frame_index = 3;
        let v = validate_inspection(&i);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message, "frame_index out of range");
        assert_eq!(v[0].subject, "annotations[1]");
    }

    #[test]
    fn score_above_one_is_reported() {
        let mut i = valid();
        i.annotations[0].detection.score = 1.5;
        let msgs: Vec<_> = validate_inspection(&i).into_iter().map(|v| v.message).collect();
        assert_eq!(msgs, vec!["score out of [0,1]"]);
    }

    #[test]
    fn constructors_reject_bad_input() {
        assert!(Frame::new(2, 2, vec![[0; 3]; 3]).is_err());
        assert!(Frame::new(0, 2, vec![]).is_err());
        assert!(BoundingBox::new(3, 0, 3, 1).is_err());
        assert!(DefectClass::new("  ").is_err());
        assert!(Detection::new(BoundingBox::new(0, 0, 1, 1).unwrap(), DefectClass::new("a").unwrap(), -0.1).is_err());
        assert!(class_set(["a", "a"]).is_err());
        assert!(class_set(Vec::<String>::new()).is_err());
        let mut p = PipelineParams::default();
        p.flattener_window = 4;
        assert!(p.validate().is_err());
    }

    #[test]
    fn json_field_names_and_timestamps() {
        let j: serde_json::Value = serde_json::to_value(annotation(0)).unwrap();
        assert_eq!(j["created_at"], "2024-03-01T12:00:00Z");
        assert_eq!(j["source"], "automatic");
        assert_eq!(j["detection"]["box"]["x_max"], 10);
        assert_eq!(j["detection"]["class"], "Junction");
        let canon = to_canonical_json(&valid()).unwrap();
        let first_keys: Vec<_> = ["\"annotations\"", "\"created_at\"", "\"depth_ref\"", "\"frame_refs\""]
            .iter()
            .map(|k| canon.find(k).unwrap())
            .collect();
        assert!(first_keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[derive(Debug, Clone)]
    enum Mutation {
        FrameIndex,
        Score(f64),
        EmptyBox,
        EvenWindow(u32),
        Threshold(f64),
        ZeroArea,
        EmptyId,
        DuplicateTag,
    }

    fn mutation() -> impl Strategy<Value = Mutation> {
        prop_oneof![
            Just(Mutation::FrameIndex),
            prop_oneof![1.0001f64..10.0, -10.0f64..-0.0001].prop_map(Mutation::Score),
            Just(Mutation::EmptyBox),
            (0u32..20).prop_map(|k| Mutation::EvenWindow(k * 2)),
            prop_oneof![1.0001f64..5.0, -5.0f64..-0.0001].prop_map(Mutation::Threshold),
            Just(Mutation::ZeroArea),
            Just(Mutation::EmptyId),
            Just(Mutation::DuplicateTag),
        ]
    }

    proptest! {
        #[test]
        fn serialization_round_trips(
            x0 in 0u32..100, y0 in 0u32..100, w in 1u32..50, h in 1u32..50,
            score in 0.0f64..=1.0, frame in 0u32..3, manual in any::<bool>(),
            secs in 0i64..2_000_000_000,
        ) {
            let mut i = valid();
            let a = &mut i.annotations[0];
            a.frame_index = frame;
            a.detection.bbox = BoundingBox::new(x0, y0, x0 + w, y0 + h).unwrap();
            a.detection.score = score;
            a.source = if manual { AnnotationSource::Manual } else { AnnotationSource::Automatic };
            a.created_at = Utc.timestamp_opt(secs, 0).unwrap();
            a.screenshot_ref = Some("shot".into());
            let text = to_canonical_json(&i).unwrap();
            let back: Inspection = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, i);
        }

        #[test]
        fn single_mutation_is_found(m in mutation(), which in 0usize..2) {
            let mut i = valid();
            let expected = match m {
                Mutation::FrameIndex => { i.annotations[which].frame_index = 3 + which as u32; "frame_index out of range" }
                Mutation::Score(s) => { i.annotations[which].detection.score = s; "score out of [0,1]" }
                Mutation::EmptyBox => { let b = &mut i.annotations[which].detection.bbox; b.x_max = b.x_min; "empty bounding box" }
                Mutation::EvenWindow(w) => { i.annotations[which].params.flattener_window = w; "flattener_window must be odd and >= 1" }
                Mutation::Threshold(t) => { i.annotations[which].params.rainbow_threshold = t; "rainbow_threshold out of [0,1]" }
                Mutation::ZeroArea => { i.annotations[which].params.min_region_area = 0; "min_region_area must be >= 1" }
                Mutation::EmptyId => { i.id.clear(); "id must be non-empty" }
                Mutation::DuplicateTag => { i.tags.push("pe100".into()); "duplicate tag" }
            };
            let v = validate_inspection(&i);
            prop_assert_eq!(v.len(), 1);
            prop_assert_eq!(v[0].message.as_str(), expected);
        }
    }
}
