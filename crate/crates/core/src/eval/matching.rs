//! Greedy one-to-one matching of scored detections to ground truth.

use serde::{Deserialize, Serialize};

use crate::geom::{iou, BBox};

/// IoU needed for a detection to match a ground-truth box.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetOutcome {
    TruePositive,
    FalsePositive,
    /// Matched an ignore-marked box: neither TP nor FP.
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMatch {
    /// Outcome per detection, in input order.
    pub detections: Vec<DetOutcome>,
    /// Index of the detection matched to each ground-truth box.
    pub gt_match: Vec<Option<usize>>,
}

impl FrameMatch {
    /// Non-ignored ground-truth boxes left unmatched.
    pub fn misses(&self, ignore: &[bool]) -> usize {
        self.gt_match
            .iter()
            .zip(ignore)
            .filter(|(m, &ig)| m.is_none() && !ig)
            .count()
    }
}

/// Match detections (already sorted by descending score) to `gt`. Each
/// detection takes the unmatched box with the highest IoU `>= iou_threshold`
/// (lowest index on ties).
pub fn match_frame(detections: &[BBox], gt: &[BBox], ignore: &[bool], iou_threshold: f64) -> FrameMatch {
    assert_eq!(gt.len(), ignore.len(), "one ignore flag per ground-truth box");
    let mut gt_match = vec![None; gt.len()];
    let mut outcomes = Vec::with_capacity(detections.len());
    for (di, d) in detections.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if gt_match[gi].is_some() {
                continue;
            }
            let v = iou(d, g);
            if v >= iou_threshold && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, gi));
            }
        }
        outcomes.push(match best {
            Some((_, gi)) => {
                gt_match[gi] = Some(di);
                if ignore[gi] {
                    DetOutcome::Ignored
                } else {
                    DetOutcome::TruePositive
                }
            }
            None => DetOutcome::FalsePositive,
        });
    }
    FrameMatch {
        detections: outcomes,
        gt_match,
    }
}
