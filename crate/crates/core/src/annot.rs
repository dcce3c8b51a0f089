//! Paired per-modality annotations.
//!
//! Every pedestrian carries a unique index and one box per modality it is
//! visible in. Objects visible in only one modality are flagged unpaired.
//! When one modality is unreadable the annotator copies the box from the
//! other, so `sensed_box == reference_box` is legal.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BBox;

/// Reasonable-subset minimum reference height in pixels.
pub const DEFAULT_MIN_HEIGHT: f64 = 55.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Reference,
    Sensed,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Reference => Modality::Sensed,
            Modality::Sensed => Modality::Reference,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Modality::Reference),
            "sensed" => Ok(Modality::Sensed),
            other => Err(Error::InvalidArgument(format!(
                "unknown modality '{other}' (expected reference or sensed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedObject {
    pub uid: u64,
    pub reference_box: Option<BBox>,
    pub sensed_box: Option<BBox>,
    pub occluded: bool,
    pub paired: bool,
}

impl PairedObject {
    pub fn paired(uid: u64, reference: BBox, sensed: BBox) -> Self {
        Self {
            uid,
            reference_box: Some(reference),
            sensed_box: Some(sensed),
            occluded: false,
            paired: true,
        }
    }

    pub fn only_in(uid: u64, modality: Modality, bbox: BBox) -> Self {
        let (reference_box, sensed_box) = match modality {
            Modality::Reference => (Some(bbox), None),
            Modality::Sensed => (None, Some(bbox)),
        };
        Self {
            uid,
            reference_box,
            sensed_box,
            occluded: false,
            paired: false,
        }
    }

    pub fn box_in(&self, modality: Modality) -> Option<&BBox> {
        match modality {
            Modality::Reference => self.reference_box.as_ref(),
            Modality::Sensed => self.sensed_box.as_ref(),
        }
    }

    /// Reference box when present, otherwise the sensed box.
    pub fn any_box(&self) -> &BBox {
        self.reference_box
            .as_ref()
            .or(self.sensed_box.as_ref())
            .expect("validated object has at least one box")
    }

    fn check(&self) -> std::result::Result<(), String> {
        let both = self.reference_box.is_some() && self.sensed_box.is_some();
        if self.reference_box.is_none() && self.sensed_box.is_none() {
            return Err("object has no box in either modality".into());
        }
        if self.paired && !both {
            return Err("paired=true but one modality box is null".into());
        }
        if !self.paired && both {
            return Err("paired=false but both modality boxes are present".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame_id: String,
    /// `[width, height]` in pixels.
    pub image_size: [u32; 2],
    pub objects: Vec<PairedObject>,
}

impl FrameAnnotation {
    /// Copy with every sensed box translated by `(dx, dy)`.
    pub fn shift_sensed(&self, dx: f64, dy: f64) -> Self {
        let mut f = self.clone();
        for o in &mut f.objects {
            if let Some(b) = o.sensed_box.as_mut() {
                *b = b.translated(dx, dy);
            }
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationDocument {
    frames: Vec<FrameAnnotation>,
}

/// A problem found while validating an annotation set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub frame_id: String,
    pub uid: Option<u64>,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.uid {
            Some(uid) => write!(f, "frame '{}', uid {}: {}", self.frame_id, uid, self.message),
            None => write!(f, "frame '{}': {}", self.frame_id, self.message),
        }
    }
}

fn overlaps_image(b: &BBox, size: [u32; 2]) -> bool {
    b.x_max() > 0.0 && b.y_max() > 0.0 && b.x_min() < size[0] as f64 && b.y_min() < size[1] as f64
}

/// Check pairing flags, uid uniqueness across the whole set and box placement.
pub fn validate(frames: &[FrameAnnotation]) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut seen: HashMap<u64, &str> = HashMap::new();
    for f in frames {
        if f.image_size[0] == 0 || f.image_size[1] == 0 {
            diags.push(Diagnostic {
                frame_id: f.frame_id.clone(),
                uid: None,
                message: format!("image size {:?} must be positive", f.image_size),
            });
        }
        for o in &f.objects {
            let mut push = |message: String| {
                diags.push(Diagnostic {
                    frame_id: f.frame_id.clone(),
                    uid: Some(o.uid),
                    message,
                })
            };
            if let Some(first) = seen.get(&o.uid) {
                push(format!(
                    "duplicate uid {} (also in frame '{}')",
                    o.uid, first
                ));
            } else {
                seen.insert(o.uid, &f.frame_id);
            }
            if let Err(m) = o.check() {
                push(m);
            }
            for (name, b) in [("reference", &o.reference_box), ("sensed", &o.sensed_box)] {
                if let Some(b) = b {
                    if !overlaps_image(b, f.image_size) {
                        push(format!("{name} box {:?} lies outside the image", b.to_array()));
                    }
                }
            }
        }
    }
    diags
}

fn first_error(frames: &[FrameAnnotation]) -> Result<()> {
    // Duplicate uids get a dedicated error naming both frames.
    let mut seen: HashMap<u64, &str> = HashMap::new();
    for f in frames {
        for o in &f.objects {
            if let Some(first) = seen.insert(o.uid, &f.frame_id) {
                return Err(Error::DuplicateUid {
                    uid: o.uid,
                    first_frame: first.to_string(),
                    second_frame: f.frame_id.clone(),
                });
            }
        }
    }
    match validate(frames).into_iter().next() {
        None => Ok(()),
        Some(d) => Err(Error::InvalidObject {
            frame_id: d.frame_id,
            uid: d.uid.unwrap_or(0),
            message: d.message,
        }),
    }
}

/// Parse without validation; only the JSON structure is checked.
pub fn parse_annotations_unchecked(text: &str) -> Result<Vec<FrameAnnotation>> {
    serde_json::from_str::<AnnotationDocument>(text)
        .map(|d| d.frames)
        .map_err(|e| Error::parse("annotation file", &e))
}

pub fn parse_annotations(text: &str) -> Result<Vec<FrameAnnotation>> {
    let frames = parse_annotations_unchecked(text)?;
    first_error(&frames)?;
    Ok(frames)
}

pub fn annotations_to_string(frames: &[FrameAnnotation]) -> String {
    let doc = AnnotationDocument {
        frames: frames.to_vec(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("annotations serialize");
    s.push('\n');
    s
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<FrameAnnotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text).map_err(|e| match e {
        Error::Parse {
            line,
            column,
            message,
            ..
        } => Error::Parse {
            context: path.display().to_string(),
            line,
            column,
            message,
        },
        other => other,
    })
}

pub fn save_annotations(path: impl AsRef<Path>, frames: &[FrameAnnotation]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, annotations_to_string(frames)).map_err(|e| Error::io(path, e))
}

/// One scored box emitted by a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub modality: Modality,
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(line).map_err(|e| Error::Parse {
            context: "detection file".into(),
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        if !d.score.is_finite() {
            return Err(Error::Parse {
                context: "detection file".into(),
                line: i + 1,
                column: 0,
                message: "score must be finite".into(),
            });
        }
        out.push(d);
    }
    Ok(out)
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text).map_err(|e| match e {
        Error::Parse {
            line,
            column,
            message,
            ..
        } => Error::Parse {
            context: path.display().to_string(),
            line,
            column,
            message,
        },
        other => other,
    })
}

pub fn save_detections(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for d in dets {
        let line = serde_json::to_string(d).expect("detection serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Distribution of per-object center displacement between modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftStatistics {
    /// `histogram[k]` counts paired objects with distance in `[k, k + 1)` pixels.
    pub histogram: Vec<u64>,
    pub paired: usize,
    pub unpaired: usize,
    pub mean_dx: f64,
    pub std_dx: f64,
    pub mean_dy: f64,
    pub std_dy: f64,
    pub mean_distance: f64,
}

impl ShiftStatistics {
    pub fn total(&self) -> usize {
        self.paired + self.unpaired
    }

    pub fn unpaired_fraction(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.unpaired as f64 / self.total() as f64
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Shift statistics over paired objects. Unpaired objects are only counted.
pub fn shift_statistics(frames: &[FrameAnnotation]) -> ShiftStatistics {
    let mut dxs = Vec::new();
    let mut dys = Vec::new();
    let mut unpaired = 0;
    for o in frames.iter().flat_map(|f| &f.objects) {
        match (&o.reference_box, &o.sensed_box) {
            (Some(r), Some(s)) if o.paired => {
                dxs.push(s.center_x() - r.center_x());
                dys.push(s.center_y() - r.center_y());
            }
            _ => unpaired += 1,
        }
    }
    let dists: Vec<f64> = dxs.iter().zip(&dys).map(|(x, y)| x.hypot(*y)).collect();
    let mut histogram = Vec::new();
    for d in &dists {
        let bin = d.floor() as usize;
        if histogram.len() <= bin {
            histogram.resize(bin + 1, 0);
        }
        histogram[bin] += 1;
    }
    let (mean_dx, std_dx) = mean_std(&dxs);
    let (mean_dy, std_dy) = mean_std(&dys);
    let (mean_distance, _) = mean_std(&dists);
    ShiftStatistics {
        histogram,
        paired: dxs.len(),
        unpaired,
        mean_dx,
        std_dx,
        mean_dy,
        std_dy,
        mean_distance,
    }
}

/// Annotations plus per-object ignore marks used during evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    pub annotation: FrameAnnotation,
    pub ignore: Vec<bool>,
}

impl EvalFrame {
    pub fn unfiltered(annotation: FrameAnnotation) -> Self {
        let ignore = vec![false; annotation.objects.len()];
        Self { annotation, ignore }
    }

    pub fn shift_sensed(&self, dx: f64, dy: f64) -> Self {
        Self {
            annotation: self.annotation.shift_sensed(dx, dy),
            ignore: self.ignore.clone(),
        }
    }
}

/// Mark objects shorter than `min_height` (reference box, or sensed box for
/// sensed-only objects) or occluded ones (unless allowed) as ignored.
/// Existing marks are kept, so the filter is idempotent.
pub fn reasonable_filter(
    frames: &[EvalFrame],
    min_height: f64,
    allow_occluded: bool,
) -> Result<Vec<EvalFrame>> {
    if !(min_height > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "min_height must be > 0, got {min_height}"
        )));
    }
    Ok(frames
        .iter()
        .map(|f| {
            let ignore = f
                .annotation
                .objects
                .iter()
                .zip(&f.ignore)
                .map(|(o, &prev)| {
                    prev || o.any_box().height() < min_height || (o.occluded && !allow_occluded)
                })
                .collect();
            EvalFrame {
                annotation: f.annotation.clone(),
                ignore,
            }
        })
        .collect())
}

/// Translate every sensed box by `(dx, dy)`; reference boxes are untouched.
pub fn shift_all_sensed(frames: &[FrameAnnotation], dx: f64, dy: f64) -> Vec<FrameAnnotation> {
    frames.iter().map(|f| f.shift_sensed(dx, dy)).collect()
}
