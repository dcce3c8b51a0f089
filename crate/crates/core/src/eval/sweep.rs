//! Whole-pixel sensed-image shifts and the per-direction robustness summary.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::mr::{mr_score, MrValue};
use crate::annot::{Detection, EvalFrame, Modality};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::synthtrain::SceneFrame;
use crate::tensornet::Tensor;

/// Anything that turns a frame into detections. `index` is the frame's
/// position in the dataset and is stable across shift modes.
pub trait Detector: Sync {
    fn detect(&self, frame: &SceneFrame, index: usize) -> Result<Vec<Detection>>;
}

impl<F> Detector for F
where
    F: Fn(&SceneFrame, usize) -> Result<Vec<Detection>> + Sync,
{
    fn detect(&self, frame: &SceneFrame, index: usize) -> Result<Vec<Detection>> {
        self(frame, index)
    }
}

/// Several detectors evaluated on the same inputs, possibly sharing work.
pub trait MultiDetector: Sync {
    fn outputs(&self) -> usize;
    fn detect_all(&self, frame: &SceneFrame, index: usize) -> Result<Vec<Vec<Detection>>>;
}

/// Ordered list of `(dx, dy)` pixel shifts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSet {
    pub modes: Vec<(i32, i32)>,
}

/// Direction names in report order.
pub const DIRECTIONS: [&str; 4] = ["S0", "S45", "S90", "S135"];

/// Modes of one direction over `[-radius, radius]`.
pub fn direction_modes(direction: &str, radius: i32) -> Result<Vec<(i32, i32)>> {
    let f: fn(i32) -> (i32, i32) = match direction {
        "S0" => |t| (t, 0),
        "S45" => |t| (t, t),
        "S90" => |t| (0, t),
        "S135" => |t| (t, -t),
        o => return Err(Error::InvalidArgument(format!("unknown direction '{o}'"))),
    };
    Ok((-radius..=radius).map(f).collect())
}

impl ShiftSet {
    /// Every mode in `[-radius, radius]^2`, `dx` major.
    pub fn full(radius: i32) -> Self {
        let modes = (-radius..=radius)
            .flat_map(|dx| (-radius..=radius).map(move |dy| (dx, dy)))
            .collect();
        Self { modes }
    }

    /// Union of the four direction sets, sorted.
    pub fn directions(radius: i32) -> Self {
        let set: BTreeSet<(i32, i32)> = DIRECTIONS
            .iter()
            .flat_map(|d| direction_modes(d, radius).expect("known direction"))
            .collect();
        Self {
            modes: set.into_iter().collect(),
        }
    }

    /// Explicit list; duplicates are rejected.
    pub fn custom(modes: Vec<(i32, i32)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for m in &modes {
            if !seen.insert(*m) {
                return Err(Error::InvalidArgument(format!("duplicate shift mode {m:?}")));
            }
        }
        Ok(Self { modes })
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }
}

/// Translate a `[C, H, W]` image by whole pixels, filling uncovered pixels with zero.
pub fn translate_image(image: &Tensor, dx: i32, dy: i32) -> Result<Tensor> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::ShapeMismatch(format!("image must be [C, H, W], got {:?}", image.shape())));
    };
    let mut out = vec![0.0; c * h * w];
    let src = image.data();
    for ch in 0..c {
        for y in 0..h {
            let sy = y as i64 - dy as i64;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w {
                let sx = x as i64 - dx as i64;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Frame with its sensed image and sensed boxes moved by `(dx, dy)`.
pub fn shift_frame(frame: &SceneFrame, dx: i32, dy: i32) -> Result<SceneFrame> {
    Ok(SceneFrame {
        reference: frame.reference.clone(),
        sensed: translate_image(&frame.sensed, dx, dy)?,
        annotation: frame.annotation.shift_sensed(dx as f64, dy as f64),
        clutter: frame.clutter.clone(),
        night: frame.night,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub dx: i32,
    pub dy: i32,
    pub mr: MrValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionStat {
    pub mu: f64,
    pub sigma: f64,
}

/// Mean and population standard deviation along each direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    #[serde(rename = "S0")]
    pub s0: DirectionStat,
    #[serde(rename = "S45")]
    pub s45: DirectionStat,
    #[serde(rename = "S90")]
    pub s90: DirectionStat,
    #[serde(rename = "S135")]
    pub s135: DirectionStat,
}

impl DirectionMetrics {
    pub fn get(&self, direction: &str) -> Option<DirectionStat> {
        match direction {
            "S0" => Some(self.s0),
            "S45" => Some(self.s45),
            "S90" => Some(self.s90),
            "S135" => Some(self.s135),
            _ => None,
        }
    }

    pub fn as_array(&self) -> [DirectionStat; 4] {
        [self.s0, self.s45, self.s90, self.s135]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<GridEntry>,
    pub directions: Option<DirectionMetrics>,
}

impl SweepResult {
    pub fn get(&self, dx: i32, dy: i32) -> Option<MrValue> {
        self.grid.iter().find(|e| e.dx == dx && e.dy == dy).map(|e| e.mr)
    }
}

/// Direction radius used for the directional summary.
pub const DIRECTION_RADIUS: i32 = 10;

/// `(mu, sigma)` over the 21 modes of each direction.
pub fn direction_metrics(grid: &[GridEntry]) -> Result<DirectionMetrics> {
    let stat = |d: &str| -> Result<DirectionStat> {
        let mut vals = Vec::new();
        for (dx, dy) in direction_modes(d, DIRECTION_RADIUS)? {
            let e = grid
                .iter()
                .find(|e| e.dx == dx && e.dy == dy)
                .ok_or(Error::MissingMode { dx, dy })?;
            vals.push(e.mr.value().ok_or_else(|| {
                Error::InvalidArgument(format!("mode ({dx}, {dy}) has no ground truth"))
            })?);
        }
        // Shifted by the first value so constant rows give exactly zero spread.
        let n = vals.len() as f64;
        let v0 = vals[0];
        let d = vals.iter().map(|v| v - v0).sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - v0 - d) * (v - v0 - d)).sum::<f64>() / n;
        Ok(DirectionStat { mu: v0 + d, sigma: var.sqrt() })
    };
    Ok(DirectionMetrics {
        s0: stat("S0")?,
        s45: stat("S45")?,
        s90: stat("S90")?,
        s135: stat("S135")?,
    })
}

struct Single<'a, D>(&'a D);

impl<D: Detector> MultiDetector for Single<'_, D> {
    fn outputs(&self) -> usize {
        1
    }
    fn detect_all(&self, frame: &SceneFrame, index: usize) -> Result<Vec<Vec<Detection>>> {
        Ok(vec![self.0.detect(frame, index)?])
    }
}

/// Run `detector` on every shifted copy of `dataset` and score each mode
/// against the reference ground truth in `eval_frames` (same order as
/// `dataset`, carrying the ignore marks).
pub fn shift_grid_sweep<D: Detector>(
    detector: &D,
    dataset: &[SceneFrame],
    eval_frames: &[EvalFrame],
    shift_set: &ShiftSet,
    exec: Execution,
) -> Result<SweepResult> {
    Ok(shift_grid_sweep_multi(&Single(detector), dataset, eval_frames, shift_set, exec)?.remove(0))
}

/// [`shift_grid_sweep`] for several detectors at once; one result per output.
pub fn shift_grid_sweep_multi<D: MultiDetector>(
    detector: &D,
    dataset: &[SceneFrame],
    eval_frames: &[EvalFrame],
    shift_set: &ShiftSet,
    exec: Execution,
) -> Result<Vec<SweepResult>> {
    if dataset.len() != eval_frames.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} frames but {} evaluation annotations",
            dataset.len(),
            eval_frames.len()
        )));
    }
    let k = detector.outputs();
    let per_mode = exec.try_map(&shift_set.modes, |_, &(dx, dy)| -> Result<Vec<MrValue>> {
        let run = || -> Result<Vec<MrValue>> {
            let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); k];
            for (i, f) in dataset.iter().enumerate() {
                let shifted = shift_frame(f, dx, dy)?;
                for (acc, d) in dets.iter_mut().zip(detector.detect_all(&shifted, i)?) {
                    acc.extend(d);
                }
            }
            let frames: Vec<EvalFrame> = eval_frames.iter().map(|f| f.shift_sensed(dx as f64, dy as f64)).collect();
            dets.iter()
                .map(|d| mr_score(&frames, d, Modality::Reference).map(|r| r.mr))
                .collect()
        };
        run().map_err(|e| Error::ModeFailed {
            dx,
            dy,
            source: Box::new(e),
        })
    })?;
    Ok((0..k)
        .map(|j| {
            let grid: Vec<GridEntry> = shift_set
                .modes
                .iter()
                .zip(&per_mode)
                .map(|(&(dx, dy), mrs)| GridEntry { dx, dy, mr: mrs[j] })
                .collect();
            let directions = direction_metrics(&grid).ok();
            SweepResult { grid, directions }
        })
        .collect())
}
