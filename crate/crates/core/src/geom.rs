//! Axis-aligned boxes, overlap, suppression and the cross-modal shift transforms.
//!
//! Boxes are stored as corner + size. The shift transform works on centers:
//! a [`ShiftTarget`] is the displacement of the sensed box center relative to
//! the reference box center, normalized by the reference width and height.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default enlargement applied to RoIs before contextual pooling.
pub const DEFAULT_CONTEXT_FACTOR: f64 = 1.5;

/// Axis-aligned rectangle in pixel coordinates with strictly positive extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    width: f64,
    height: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, width: f64, height: f64) -> Result<Self> {
        if !(x_min.is_finite() && y_min.is_finite() && width.is_finite() && height.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinates [{x_min}, {y_min}, {width}, {height}]"
            )));
        }
        if width <= 0.0 || height <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "non-positive size {width}x{height}"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            width,
            height,
        })
    }

    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        Self::new(cx - width / 2.0, cy - height / 2.0, width, height)
    }

    /// Box spanning the two corners. Fails when the span is empty.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn width(&self) -> f64 {
        self.width
    }
    pub fn height(&self) -> f64 {
        self.height
    }
    pub fn x_max(&self) -> f64 {
        self.x_min + self.width
    }
    pub fn y_max(&self) -> f64 {
        self.y_min + self.height
    }
    pub fn center_x(&self) -> f64 {
        self.x_min + self.width / 2.0
    }
    pub fn center_y(&self) -> f64 {
        self.y_min + self.height / 2.0
    }
    pub fn center(&self) -> (f64, f64) {
        (self.center_x(), self.center_y())
    }
    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Same size, translated by `(dx, dy)` pixels.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            ..*self
        }
    }

    /// Every coordinate divided by `factor` (image pixels to feature cells).
    pub fn scaled_down(&self, factor: f64) -> Self {
        Self {
            x_min: self.x_min / factor,
            y_min: self.y_min / factor,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width, self.height]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Width/height-normalized center displacement between two boxes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ShiftTarget {
    pub tx: f64,
    pub ty: f64,
}

impl ShiftTarget {
    pub const ZERO: ShiftTarget = ShiftTarget { tx: 0.0, ty: 0.0 };

    pub fn new(tx: f64, ty: f64) -> Self {
        Self { tx, ty }
    }
}

/// Intersection over union. Symmetric, 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x_max().min(b.x_max()) - a.x_min.max(b.x_min);
    let ih = a.y_max().min(b.y_max()) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// Shift target that carries the reference center onto the sensed center.
pub fn encode_shift(reference: &BBox, sensed: &BBox) -> ShiftTarget {
    ShiftTarget {
        tx: (sensed.center_x() - reference.center_x()) / reference.width,
        ty: (sensed.center_y() - reference.center_y()) / reference.height,
    }
}

/// Inverse of [`encode_shift`]: move the center by `(tx * width, ty * height)`.
pub fn apply_shift(bbox: &BBox, target: ShiftTarget) -> BBox {
    bbox.translated(target.tx * bbox.width, target.ty * bbox.height)
}

/// Draw a shift from independent zero-mean normals with the given standard
/// deviations (x then y) and apply it to `bbox`. Returns the jittered box and
/// the drawn shift.
pub fn jitter_box_with_target<R: Rng + ?Sized>(
    bbox: &BBox,
    sigma_x: f64,
    sigma_y: f64,
    rng: &mut R,
) -> Result<(BBox, ShiftTarget)> {
    if !(sigma_x >= 0.0 && sigma_y >= 0.0) || !sigma_x.is_finite() || !sigma_y.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "jitter sigma must be finite and non-negative, got ({sigma_x}, {sigma_y})"
        )));
    }
    let nx = Normal::new(0.0, sigma_x).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let ny = Normal::new(0.0, sigma_y).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let t = ShiftTarget {
        tx: nx.sample(rng),
        ty: ny.sample(rng),
    };
    Ok((apply_shift(bbox, t), t))
}

pub fn jitter_box<R: Rng + ?Sized>(
    bbox: &BBox,
    sigma_x: f64,
    sigma_y: f64,
    rng: &mut R,
) -> Result<BBox> {
    jitter_box_with_target(bbox, sigma_x, sigma_y, rng).map(|(b, _)| b)
}

/// Scale `bbox` about its center by `factor`, then clip to `[0, width] x [0, height]`.
pub fn enlarge_context(bbox: &BBox, factor: f64, bounds: (f64, f64)) -> Result<BBox> {
    if !(factor >= 1.0) || !factor.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "context factor must be >= 1, got {factor}"
        )));
    }
    let (cx, cy) = bbox.center();
    let hw = bbox.width * factor / 2.0;
    let hh = bbox.height * factor / 2.0;
    let x0 = (cx - hw).max(0.0);
    let y0 = (cy - hh).max(0.0);
    let x1 = (cx + hw).min(bounds.0);
    let y1 = (cy + hh).min(bounds.1);
    BBox::from_corners(x0, y0, x1, y1)
        .map_err(|_| Error::InvalidBox(format!("{:?} lies outside the image", bbox.to_array())))
}

/// Score order used by suppression and matching: descending score, then
/// ascending index.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. Returns kept indices in score order.
pub fn nms(boxes: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let scores: Vec<f64> = boxes.iter().map(|(_, s)| *s).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(&scores) {
        if kept
            .iter()
            .all(|&k| iou(&boxes[k].0, &boxes[i].0) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}
