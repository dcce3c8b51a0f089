//! Region-level heads and the per-region alignment / fusion operations.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::backbone::TwoStreamFeatures;
use crate::error::{Error, Result};
use crate::geom::{apply_shift, enlarge_context, BBox, ShiftTarget};
use crate::tensornet::{roi_align, FcLayer, Tensor};

/// Two fully connected layers with a ReLU in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHead {
    pub fc1: FcLayer,
    pub fc2: FcLayer,
}

/// Predicts `(t_x, t_y)` from the concatenated contextual region features.
pub type RfaHead = MlpHead;
/// Per-modality pedestrian/background logits used for fusion weights.
pub type ConfidenceBranch = MlpHead;
/// Classification logits (2) followed by box regression deltas (4).
pub type DetectHead = MlpHead;

pub const DETECT_OUTPUTS: usize = 6;

impl MlpHead {
    pub fn new(fc1: FcLayer, fc2: FcLayer) -> Result<Self> {
        if fc1.out_dim() != fc2.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "head layers do not chain: {} -> {}",
                fc1.out_dim(),
                fc2.in_dim()
            )));
        }
        Ok(Self { fc1, fc2 })
    }

    /// He-initialized hidden layer; output layer drawn with std `out_std`.
    pub fn random<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        let fc1 = FcLayer::random(in_dim, hidden, 2.0, rng);
        let mut fc2 = FcLayer::zeros(hidden, out_dim);
        let normal = Normal::new(0.0, out_std).expect("finite std");
        for w in fc2.weights.data_mut() {
            *w = normal.sample(rng);
        }
        Self { fc1, fc2 }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fc1: FcLayer::zeros(self.fc1.in_dim(), self.fc1.out_dim()),
            fc2: FcLayer::zeros(self.fc2.in_dim(), self.fc2.out_dim()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim()
    }

    /// Returns (post-ReLU hidden rows, output rows).
    pub fn forward_rows(&self, x: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut h = self.fc1.forward_rows(x, n);
        for v in &mut h {
            *v = v.max(0.0);
        }
        let y = self.fc2.forward_rows(&h, n);
        (h, y)
    }

    /// Accumulates parameter gradients; returns input gradients when asked.
    pub fn backward_rows(
        &self,
        x: &[f64],
        hidden: &[f64],
        dy: &[f64],
        n: usize,
        grad: &mut MlpHead,
        need_dx: bool,
    ) -> Option<Vec<f64>> {
        let mut dh = self
            .fc2
            .backward_rows(hidden, dy, n, &mut grad.fc2, true)
            .expect("requested");
        for (g, h) in dh.iter_mut().zip(hidden) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        self.fc1.backward_rows(x, &dh, n, &mut grad.fc1, need_dx)
    }

    fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "head expects {} inputs, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        Ok(self.forward_rows(x, 1).1)
    }
}

/// Settings shared by every region-level operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionConfig {
    pub pooled_size: usize,
    pub samples_per_bin: usize,
    pub context_factor: f64,
    /// `(width, height)` of the image in pixels, used to clip context regions.
    pub image_bounds: (f64, f64),
}

/// Context-enlarged RoI, clipped to the image when that leaves a valid box.
pub fn context_region(roi: &BBox, factor: f64, bounds: (f64, f64)) -> Result<BBox> {
    match enlarge_context(roi, factor, bounds) {
        Ok(b) => Ok(b),
        Err(Error::InvalidBox(_)) => {
            BBox::from_center(roi.center_x(), roi.center_y(), roi.width() * factor, roi.height() * factor)
        }
        Err(e) => Err(e),
    }
}

/// Output of the alignment module for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct RfaOutput {
    pub shift: ShiftTarget,
    /// Sensed-side region the aligned feature was pooled from (image pixels).
    pub aligned_region: BBox,
    pub aligned_sensed: Tensor,
    pub reference: Tensor,
}

/// Region feature alignment: pool both streams on the enlarged proposal,
/// predict the sensed shift, and re-pool the sensed stream on the shifted
/// (un-enlarged) proposal. The reference feature is pooled on the proposal.
pub fn rfa_forward(
    features: &TwoStreamFeatures,
    proposals: &[BBox],
    head: &RfaHead,
    config: &RegionConfig,
) -> Result<Vec<RfaOutput>> {
    if proposals.is_empty() {
        return Err(Error::Empty("rfa_forward needs at least one proposal".into()));
    }
    let (k, spb, s) = (config.pooled_size, config.samples_per_bin, features.stride);
    proposals
        .iter()
        .map(|p| {
            let ctx = context_region(p, config.context_factor, config.image_bounds)?.scaled_down(s);
            let cr = roi_align(&features.reference, &ctx, k, k, spb)?;
            let cs = roi_align(&features.sensed, &ctx, k, k, spb)?;
            let joint = Tensor::concat(&[&cr, &cs])?;
            let out = head.forward_one(joint.data())?;
            if out.len() != 2 {
                return Err(Error::ShapeMismatch(format!(
                    "RFA head must output 2 values, got {}",
                    out.len()
                )));
            }
            let shift = ShiftTarget::new(out[0], out[1]);
            let aligned_region = apply_shift(p, shift);
            Ok(RfaOutput {
                shift,
                aligned_region,
                aligned_sensed: roi_align(&features.sensed, &aligned_region.scaled_down(s), k, k, spb)?,
                reference: roi_align(&features.reference, &p.scaled_down(s), k, k, spb)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceWeights {
    pub reference: f64,
    pub sensed: f64,
    pub disagreement: f64,
    pub p1_reference: f64,
    pub p1_sensed: f64,
}

impl ConfidenceWeights {
    pub const UNIT: ConfidenceWeights = ConfidenceWeights {
        reference: 1.0,
        sensed: 1.0,
        disagreement: 1.0,
        p1_reference: 1.0,
        p1_sensed: 1.0,
    };

    /// Weights from pedestrian probabilities: `W = |p1 - p0|`, `W_d = 1 - |p1_r - p1_s|`.
    pub fn from_probabilities(p1_reference: f64, p1_sensed: f64) -> Self {
        Self {
            reference: (2.0 * p1_reference - 1.0).abs(),
            sensed: (2.0 * p1_sensed - 1.0).abs(),
            disagreement: 1.0 - (p1_reference - p1_sensed).abs(),
            p1_reference,
            p1_sensed,
        }
    }
}

/// Run both confidence branches and derive the fusion weights.
pub fn confidence_weights(
    reference_feature: &Tensor,
    sensed_feature: &Tensor,
    reference_branch: &ConfidenceBranch,
    sensed_branch: &ConfidenceBranch,
) -> Result<ConfidenceWeights> {
    let zr = reference_branch.forward_one(reference_feature.data())?;
    let zs = sensed_branch.forward_one(sensed_feature.data())?;
    if zr.len() != 2 || zs.len() != 2 {
        return Err(Error::ShapeMismatch("confidence branches must output 2 logits".into()));
    }
    let (_, p1r) = crate::tensornet::softmax2(zr[0], zr[1]);
    let (_, p1s) = crate::tensornet::softmax2(zs[0], zs[1]);
    Ok(ConfidenceWeights::from_probabilities(p1r, p1s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FusionMode {
    /// Reference scaled by `W_r`, sensed by `W_s * W_d`, then concatenated.
    #[default]
    #[serde(rename = "caf")]
    ConfidenceAware,
    /// Plain channel concatenation.
    #[serde(rename = "naive")]
    NaiveConcat,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "caf" => Ok(FusionMode::ConfidenceAware),
            "naive" => Ok(FusionMode::NaiveConcat),
            o => Err(Error::InvalidArgument(format!("unknown fusion mode '{o}' (caf|naive)"))),
        }
    }
}

pub fn fuse(
    reference_feature: &Tensor,
    sensed_feature: &Tensor,
    weights: &ConfidenceWeights,
    mode: FusionMode,
) -> Result<Tensor> {
    if reference_feature.shape() != sensed_feature.shape() {
        return Err(Error::ShapeMismatch(format!(
            "fusing {:?} with {:?}",
            reference_feature.shape(),
            sensed_feature.shape()
        )));
    }
    match mode {
        FusionMode::NaiveConcat => Tensor::concat(&[reference_feature, sensed_feature]),
        FusionMode::ConfidenceAware => Tensor::concat(&[
            &reference_feature.scale(weights.reference),
            &sensed_feature.scale(weights.sensed * weights.disagreement),
        ]),
    }
}

/// Classification logits `(z0, z1)` and the four box regression deltas.
pub fn detect_head(fused: &Tensor, head: &DetectHead) -> Result<([f64; 2], [f64; 4])> {
    let o = head.forward_one(fused.data())?;
    if o.len() != DETECT_OUTPUTS {
        return Err(Error::ShapeMismatch(format!(
            "detect head must output {DETECT_OUTPUTS} values, got {}",
            o.len()
        )));
    }
    Ok(([o[0], o[1]], [o[2], o[3], o[4], o[5]]))
}
