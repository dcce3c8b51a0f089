//! Miss rate versus false positives per image, and the log-average miss rate.

use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::matching::{match_frame, DetOutcome, MATCH_IOU};
use crate::annot::{Detection, EvalFrame, Modality};
use crate::error::{Error, Result};
use crate::geom::BBox;

/// Lower clamp applied to miss rates before taking logarithms.
pub const MISS_RATE_FLOOR: f64 = 1e-4;
/// Number of log-spaced FPPI sample points over `[1e-2, 1]`.
pub const FPPI_SAMPLES: usize = 9;

/// Log-average miss rate, or the marker for an evaluation without ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MrValue {
    Value(f64),
    NoGt,
}

impl MrValue {
    pub const NO_GT_MARKER: &'static str = "no-gt";

    pub fn value(self) -> Option<f64> {
        match self {
            MrValue::Value(v) => Some(v),
            MrValue::NoGt => None,
        }
    }
}

impl std::fmt::Display for MrValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MrValue::Value(v) => write!(f, "{v}"),
            MrValue::NoGt => f.write_str(Self::NO_GT_MARKER),
        }
    }
}

impl std::str::FromStr for MrValue {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == Self::NO_GT_MARKER {
            return Ok(MrValue::NoGt);
        }
        s.parse::<f64>()
            .map(MrValue::Value)
            .map_err(|_| Error::InvalidArgument(format!("'{s}' is neither a number nor '{}'", Self::NO_GT_MARKER)))
    }
}

impl Serialize for MrValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MrValue::Value(v) => s.serialize_f64(*v),
            MrValue::NoGt => s.serialize_str(Self::NO_GT_MARKER),
        }
    }
}

impl<'de> Deserialize<'de> for MrValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(MrValue::Value(v)),
            Raw::Str(s) if s == MrValue::NO_GT_MARKER => Ok(MrValue::NoGt),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("unexpected mr marker '{s}'"))),
        }
    }
}

/// Operating points ordered by descending score threshold. The first point is
/// the empty operating point `(0, 1)` at an infinite threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    /// `(fppi, miss_rate)` pairs.
    pub points: Vec<(f64, f64)>,
    /// Score cutoff of each point (detections with score `>=` cutoff are kept).
    pub thresholds: Vec<f64>,
}

impl EvalCurve {
    /// FPPI non-decreasing and miss rate non-increasing as thresholds fall.
    pub fn is_monotone(&self) -> bool {
        self.points
            .windows(2)
            .all(|w| w[1].0 >= w[0].0 && w[1].1 <= w[0].1)
            && self.points.iter().all(|p| (0.0..=1.0).contains(&p.1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrResult {
    pub mr: MrValue,
    pub curve: EvalCurve,
    pub ground_truth: usize,
    pub frames: usize,
}

/// The FPPI values at which the curve is sampled.
pub fn fppi_sample_points() -> [f64; FPPI_SAMPLES] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / (FPPI_SAMPLES - 1) as f64))
}

/// Log-average miss rate of a curve: the miss rate at the last point with
/// FPPI at or below each sample, clamped at the floor, geometrically averaged.
pub fn log_average_miss_rate(curve: &EvalCurve) -> f64 {
    let samples = fppi_sample_points().map(|r| {
        curve
            .points
            .iter()
            .take_while(|p| p.0 <= r)
            .last()
            .map_or(1.0, |p| p.1)
            .max(MISS_RATE_FLOOR)
    });
    // Geometric mean taken relative to the first sample; exact for constant curves.
    let m0 = samples[0];
    let acc: f64 = samples.iter().map(|m| (m / m0).ln()).sum();
    m0 * (acc / FPPI_SAMPLES as f64).exp()
}

/// Ground-truth boxes of `frame` for `modality` and their ignore flags.
/// Objects without a box in `modality` contribute their other box as an
/// ignore region.
pub fn ground_truth(frame: &EvalFrame, modality: Modality) -> (Vec<BBox>, Vec<bool>) {
    frame
        .annotation
        .objects
        .iter()
        .zip(&frame.ignore)
        .map(|(o, &ig)| match o.box_in(modality) {
            Some(b) => (*b, ig),
            None => (*o.box_in(modality.other()).expect("object has a box"), true),
        })
        .unzip()
}

fn box_key(b: &BBox) -> [f64; 4] {
    b.to_array()
}

/// Deterministic per-frame detection order: score descending, then box coordinates.
pub(crate) fn sort_detections(dets: &mut [(BBox, f64)]) {
    dets.sort_by(|a, b| {
        b.1.total_cmp(&a.1).then_with(|| {
            box_key(&a.0)
                .iter()
                .zip(box_key(&b.0))
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
}

/// Score `detections` against the `modality` ground truth of `frames`.
/// All detections are matched against that modality regardless of their own
/// modality tag.
pub fn mr_score(frames: &[EvalFrame], detections: &[Detection], modality: Modality) -> Result<MrResult> {
    let mut by_frame: HashMap<&str, Vec<(BBox, f64)>> = HashMap::new();
    let index: HashMap<&str, usize> = frames
        .iter()
        .enumerate()
        .map(|(i, f)| (f.annotation.frame_id.as_str(), i))
        .collect();
    for d in detections {
        if !index.contains_key(d.frame_id.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "detection refers to unknown frame '{}'",
                d.frame_id
            )));
        }
        if !d.score.is_finite() {
            return Err(Error::NonFinite(format!("score of a detection in frame '{}'", d.frame_id)));
        }
        by_frame.entry(d.frame_id.as_str()).or_default().push((d.bbox, d.score));
    }

    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0usize;
    for f in frames {
        let (gt, ignore) = ground_truth(f, modality);
        n_gt += ignore.iter().filter(|&&i| !i).count();
        let mut dets = by_frame.remove(f.annotation.frame_id.as_str()).unwrap_or_default();
        sort_detections(&mut dets);
        let boxes: Vec<BBox> = dets.iter().map(|d| d.0).collect();
        let m = match_frame(&boxes, &gt, &ignore, MATCH_IOU);
        for (o, (_, s)) in m.detections.iter().zip(&dets) {
            match o {
                DetOutcome::TruePositive => scored.push((*s, true)),
                DetOutcome::FalsePositive => scored.push((*s, false)),
                DetOutcome::Ignored => {}
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let n_frames = frames.len().max(1) as f64;
    let gt_den = n_gt.max(1) as f64;
    let mut points = vec![(0.0, if n_gt == 0 { 0.0 } else { 1.0 })];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let miss = if n_gt == 0 { 0.0 } else { 1.0 - tp as f64 / gt_den };
        points.push((fp as f64 / n_frames, miss));
        thresholds.push(s);
    }
    let curve = EvalCurve { points, thresholds };
    let mr = if n_gt == 0 {
        MrValue::NoGt
    } else {
        MrValue::Value(log_average_miss_rate(&curve))
    };
    Ok(MrResult {
        mr,
        curve,
        ground_truth: n_gt,
        frames: frames.len(),
    })
}
