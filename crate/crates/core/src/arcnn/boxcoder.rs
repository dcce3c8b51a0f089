//! Fast R-CNN style box regression targets.

use crate::error::Result;
use crate::geom::BBox;

/// Target normalization applied to `(dx, dy, dw, dh)`.
pub const BOX_DELTA_STDS: [f64; 4] = [0.1, 0.1, 0.2, 0.2];
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn encode_box_deltas(proposal: &BBox, target: &BBox) -> [f64; 4] {
    let (pw, ph) = (proposal.width(), proposal.height());
    [
        (target.center_x() - proposal.center_x()) / pw / BOX_DELTA_STDS[0],
        (target.center_y() - proposal.center_y()) / ph / BOX_DELTA_STDS[1],
        (target.width() / pw).ln() / BOX_DELTA_STDS[2],
        (target.height() / ph).ln() / BOX_DELTA_STDS[3],
    ]
}

pub fn decode_box_deltas(proposal: &BBox, deltas: &[f64; 4]) -> Result<BBox> {
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = proposal.center_x() + deltas[0] * BOX_DELTA_STDS[0] * pw;
    let cy = proposal.center_y() + deltas[1] * BOX_DELTA_STDS[1] * ph;
    let w = pw * (deltas[2] * BOX_DELTA_STDS[2]).min(MAX_LOG_SCALE).exp();
    let h = ph * (deltas[3] * BOX_DELTA_STDS[3]).min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}
