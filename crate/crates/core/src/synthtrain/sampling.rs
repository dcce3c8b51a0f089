//! Region sampling against reference ground truth and sensed RoI jitter.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::annot::{FrameAnnotation, Modality};
use crate::arcnn::{encode_box_deltas, TrainingRoi};
use crate::error::{Error, Result};
use crate::geom::{apply_shift, encode_shift, iou, jitter_box_with_target, BBox, ShiftTarget};

/// A sampled batch. `positives_only` marks batches that found no eligible
/// negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minibatch {
    pub rois: Vec<TrainingRoi>,
    pub positives_only: bool,
}

/// Label assignment for one RoI, or `None` when it is excluded.
pub fn assign_label(roi: &BBox, frame: &FrameAnnotation, negative_floor: f64) -> Option<TrainingRoi> {
    let mut best: Option<(f64, usize)> = None;
    for (k, o) in frame.objects.iter().enumerate() {
        if let Some(r) = o.box_in(Modality::Reference) {
            let v = iou(roi, r);
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, k));
            }
        }
    }
    let (v, k) = best.unwrap_or((0.0, usize::MAX));
    if v > 0.5 {
        let o = &frame.objects[k];
        let r = o.reference_box.as_ref().expect("matched reference box");
        Some(TrainingRoi {
            roi: *roi,
            sensed_roi: *roi,
            label: 1,
            sensed_label: usize::from(o.sensed_box.is_some()),
            // Moves the RoI by the ground-truth displacement, in RoI units.
            shift_target: o.sensed_box.as_ref().map(|s| roi_shift_target(roi, r, s)),
            reg_target: Some(encode_box_deltas(roi, r)),
        })
    } else if v >= negative_floor {
        Some(TrainingRoi::background(*roi))
    } else {
        None
    }
}

/// Ground-truth displacement `sensed - reference` expressed relative to `roi`.
/// Equals `encode_shift(reference, sensed)` when `roi == reference`.
pub fn roi_shift_target(roi: &BBox, reference: &BBox, sensed: &BBox) -> ShiftTarget {
    let t = encode_shift(reference, sensed);
    ShiftTarget::new(
        t.tx * reference.width() / roi.width(),
        t.ty * reference.height() / roi.height(),
    )
}

/// Label proposals against reference ground truth and draw a batch of
/// `batch_rois` with at most `positive_fraction` positives.
pub fn sample_minibatch<R: Rng + ?Sized>(
    proposals: &[BBox],
    frame: &FrameAnnotation,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Minibatch> {
    if proposals.is_empty() {
        return Err(Error::Empty("sample_minibatch needs proposals".into()));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for p in proposals {
        match assign_label(p, frame, config.negative_iou_floor) {
            Some(r) if r.label == 1 => pos.push(r),
            Some(r) => neg.push(r),
            None => {}
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let max_pos = ((config.batch_rois as f64) * config.positive_fraction).floor() as usize;
    pos.truncate(max_pos);
    let n_neg = config.batch_rois.saturating_sub(pos.len()).min(neg.len());
    let positives_only = neg.is_empty();
    let mut rois = pos;
    rois.extend(neg.into_iter().take(n_neg));
    Ok(Minibatch { rois, positives_only })
}

/// Jitter every sensed RoI and recompute its shift target so the shifted
/// region still lands on the sensed ground-truth center.
pub fn apply_roi_jitter<R: Rng + ?Sized>(
    batch: &[TrainingRoi],
    sigma: (f64, f64),
    rng: &mut R,
) -> Result<Vec<TrainingRoi>> {
    if sigma == (0.0, 0.0) {
        return Ok(batch.to_vec());
    }
    batch
        .iter()
        .map(|r| {
            let (jittered, _) = jitter_box_with_target(&r.sensed_roi, sigma.0, sigma.1, rng)?;
            let shift_target = r.shift_target.map(|t| retarget(&r.sensed_roi, t, &jittered));
            Ok(TrainingRoi {
                sensed_roi: jittered,
                shift_target,
                ..*r
            })
        })
        .collect()
}

/// Target that moves `jittered` onto the center `apply_shift(original, t)` reaches.
pub fn retarget(original: &BBox, t: ShiftTarget, jittered: &BBox) -> ShiftTarget {
    let dest = apply_shift(original, t);
    ShiftTarget::new(
        (dest.center_x() - jittered.center_x()) / jittered.width(),
        (dest.center_y() - jittered.center_y()) / jittered.height(),
    )
}
