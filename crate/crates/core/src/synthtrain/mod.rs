//! Synthetic weakly aligned scenes, region sampling with RoI jitter, and the
//! SGD training loop.

mod dataset;
mod sampling;
mod scene;
mod train;

use serde::{Deserialize, Serialize};

use crate::arcnn::{FusionMode, GradientFlow, ProposalConfig};
use crate::error::{Error, Result};

pub use dataset::{load_dataset, save_dataset, DATASET_FORMAT};
pub use sampling::{apply_roi_jitter, assign_label, retarget, roi_shift_target, sample_minibatch, Minibatch};
pub use scene::{generate_dataset, generate_scene, SceneConfig, SceneFrame};
pub use train::{train, IterationRecord, Sgd, TrainReport};

/// Optimizer, sampling and ablation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// First epoch (0-based) trained at `learning_rate * 0.1`.
    pub decay_epoch: usize,
    pub batch_rois: usize,
    pub positive_fraction: f64,
    pub jitter_sigma: (f64, f64),
    pub lambda: f64,
    pub enable_rfa: bool,
    pub enable_jitter: bool,
    pub fusion: FusionMode,
    /// RoIs whose best reference IoU is below this are left out of batches.
    pub negative_iou_floor: f64,
    pub gradient_flow: GradientFlow,
    /// Train each frame left-right mirrored with probability 1/2.
    pub horizontal_flip: bool,
    pub proposals: ProposalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 3,
            decay_epoch: 2,
            batch_rois: 64,
            positive_fraction: 0.25,
            jitter_sigma: (0.05, 0.05),
            lambda: 1.0,
            enable_rfa: true,
            enable_jitter: true,
            fusion: FusionMode::ConfidenceAware,
            negative_iou_floor: 0.1,
            gradient_flow: GradientFlow::DetachSampling,
            horizontal_flip: true,
            proposals: ProposalConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Baseline: plain concatenation, no alignment, no jitter.
    pub fn baseline() -> Self {
        Self {
            enable_rfa: false,
            enable_jitter: false,
            fusion: FusionMode::NaiveConcat,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda >= 0.0) {
            return bad("weight decay and lambda must be >= 0".into());
        }
        if self.batch_rois == 0 || !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad("batch_rois must be >= 1 and positive_fraction in [0, 1]".into());
        }
        if !(self.jitter_sigma.0 >= 0.0 && self.jitter_sigma.1 >= 0.0) {
            return bad("jitter sigma must be >= 0".into());
        }
        if !(0.0..=0.5).contains(&self.negative_iou_floor) {
            return bad("negative IoU floor must lie in [0, 0.5]".into());
        }
        self.proposals.validate()
    }

    /// Sigma actually applied to sensed RoIs.
    pub fn effective_jitter(&self) -> (f64, f64) {
        if self.enable_jitter {
            self.jitter_sigma
        } else {
            (0.0, 0.0)
        }
    }
}
