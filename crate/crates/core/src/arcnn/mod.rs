//! Aligned-region detector: two-stream features, region feature alignment
//! (RFA), confidence-aware fusion and the detection head.

mod backbone;
mod batch;
mod boxcoder;
mod checkpoint;
mod detector;
mod heads;
mod proposals;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensornet::{FcLayer, Tensor, DEFAULT_POOLED_SIZE, DEFAULT_SAMPLES_PER_BIN};

pub use backbone::{
    extract_features, Backbone, ConvLayer, TwoStreamFeatures, FEATURE_CHANNELS, FEATURE_STRIDE,
};
pub use batch::{
    classification_loss, regression_loss, shift_loss, total_loss, BatchForward, GradientFlow, LossTerms,
    TrainingRoi,
};
pub use boxcoder::{decode_box_deltas, encode_box_deltas, BOX_DELTA_STDS};
pub use checkpoint::{load_checkpoint, save_checkpoint, checkpoint_from_str, checkpoint_to_string, CHECKPOINT_FORMAT};
pub use detector::{ArcnnDetector, DetectorBank, DetectorConfig};
pub use heads::{
    confidence_weights, context_region, detect_head, fuse, rfa_forward, ConfidenceBranch,
    ConfidenceWeights, DetectHead, FusionMode, MlpHead, RegionConfig, RfaHead, RfaOutput,
    DETECT_OUTPUTS,
};
pub use proposals::{aggregate_proposals, scripted_proposals, ProposalConfig};

/// Architecture and ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub pooled_size: usize,
    pub samples_per_bin: usize,
    pub context_factor: f64,
    pub rfa_hidden: usize,
    pub confidence_hidden: usize,
    pub detect_hidden: usize,
    pub enable_rfa: bool,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pooled_size: DEFAULT_POOLED_SIZE,
            samples_per_bin: DEFAULT_SAMPLES_PER_BIN,
            context_factor: crate::geom::DEFAULT_CONTEXT_FACTOR,
            rfa_hidden: 256,
            confidence_hidden: 64,
            detect_hidden: 128,
            enable_rfa: true,
            fusion: FusionMode::ConfidenceAware,
        }
    }
}

impl ModelConfig {
    /// Values per pooled region feature of one stream.
    pub fn pooled_len(&self) -> usize {
        FEATURE_CHANNELS * self.pooled_size * self.pooled_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.pooled_size == 0 || self.samples_per_bin == 0 {
            return Err(Error::InvalidArgument("pooled size and samples per bin must be >= 1".into()));
        }
        if !(self.context_factor >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "context factor must be >= 1, got {}",
                self.context_factor
            )));
        }
        if self.rfa_hidden == 0 || self.confidence_hidden == 0 || self.detect_hidden == 0 {
            return Err(Error::InvalidArgument("hidden widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Trainable heads. Backbones are frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heads {
    pub rfa: RfaHead,
    pub conf_reference: ConfidenceBranch,
    pub conf_sensed: ConfidenceBranch,
    pub detect: DetectHead,
}

pub const HEAD_LAYER_NAMES: [&str; 8] = [
    "rfa.fc1",
    "rfa.fc2",
    "conf_reference.fc1",
    "conf_reference.fc2",
    "conf_sensed.fc1",
    "conf_sensed.fc2",
    "detect.fc1",
    "detect.fc2",
];

impl Heads {
    pub fn zeros_like(&self) -> Self {
        Self {
            rfa: self.rfa.zeros_like(),
            conf_reference: self.conf_reference.zeros_like(),
            conf_sensed: self.conf_sensed.zeros_like(),
            detect: self.detect.zeros_like(),
        }
    }

    /// Layers in [`HEAD_LAYER_NAMES`] order.
    pub fn layers(&self) -> [&FcLayer; 8] {
        [
            &self.rfa.fc1,
            &self.rfa.fc2,
            &self.conf_reference.fc1,
            &self.conf_reference.fc2,
            &self.conf_sensed.fc1,
            &self.conf_sensed.fc2,
            &self.detect.fc1,
            &self.detect.fc2,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut FcLayer; 8] {
        [
            &mut self.rfa.fc1,
            &mut self.rfa.fc2,
            &mut self.conf_reference.fc1,
            &mut self.conf_reference.fc2,
            &mut self.conf_sensed.fc1,
            &mut self.conf_sensed.fc2,
            &mut self.detect.fc1,
            &mut self.detect.fc2,
        ]
    }

    /// Look up `"<layer>.weight"` or `"<layer>.bias"`.
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        let (layer, part) = name.rsplit_once('.')?;
        let idx = HEAD_LAYER_NAMES.iter().position(|n| *n == layer)?;
        let l = self.layers()[idx];
        match part {
            "weight" => Some(&l.weights),
            "bias" => Some(&l.bias),
            _ => None,
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (layer, part) = name.rsplit_once('.')?;
        let idx = HEAD_LAYER_NAMES.iter().position(|n| *n == layer)?;
        let [a, b, c, d, e, f, g, h] = self.layers_mut();
        let l = [a, b, c, d, e, f, g, h].into_iter().nth(idx)?;
        match part {
            "weight" => Some(&mut l.weights),
            "bias" => Some(&mut l.bias),
            _ => None,
        }
    }
}

/// Complete detector parameters plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcnnModel {
    pub config: ModelConfig,
    pub backbone_reference: Backbone,
    pub backbone_sensed: Backbone,
    pub heads: Heads,
}

impl ArcnnModel {
    /// Seeded initialization. Backbones depend only on `seed`, so models
    /// built from the same seed share identical feature extractors.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone_reference = Backbone::random(&mut rng);
        let backbone_sensed = Backbone::random(&mut rng);
        let p = config.pooled_len();
        let heads = Heads {
            rfa: MlpHead::random(2 * p, config.rfa_hidden, 2, 1e-3, &mut rng),
            conf_reference: MlpHead::random(p, config.confidence_hidden, 2, 1e-2, &mut rng),
            conf_sensed: MlpHead::random(p, config.confidence_hidden, 2, 1e-2, &mut rng),
            detect: MlpHead::random(2 * p, config.detect_hidden, DETECT_OUTPUTS, 1e-2, &mut rng),
        };
        Ok(Self {
            config,
            backbone_reference,
            backbone_sensed,
            heads,
        })
    }

    pub fn region_config(&self, image_bounds: (f64, f64)) -> RegionConfig {
        RegionConfig {
            pooled_size: self.config.pooled_size,
            samples_per_bin: self.config.samples_per_bin,
            context_factor: self.config.context_factor,
            image_bounds,
        }
    }

    /// Feature maps for a `[3, H, W]` image pair. Each image is standardized
    /// before entering its bias-free backbone.
    pub fn features(&self, reference: &Tensor, sensed: &Tensor) -> Result<TwoStreamFeatures> {
        extract_features(
            &standardize(reference),
            &standardize(sensed),
            &self.backbone_reference,
            &self.backbone_sensed,
        )
    }

    pub fn check_shapes(&self) -> Result<()> {
        let p = self.config.pooled_len();
        let h = &self.heads;
        let expect = [
            (&h.rfa, 2 * p, 2),
            (&h.conf_reference, p, 2),
            (&h.conf_sensed, p, 2),
            (&h.detect, 2 * p, DETECT_OUTPUTS),
        ];
        for (head, i, o) in expect {
            if head.in_dim() != i || head.out_dim() != o || head.fc1.out_dim() != head.fc2.in_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "head {}->{} does not match expected {i}->{o}",
                    head.in_dim(),
                    head.out_dim()
                )));
            }
        }
        Ok(())
    }
}

/// Zero mean, unit variance over all pixels and channels.
pub fn standardize(image: &Tensor) -> Tensor {
    let n = image.len().max(1) as f64;
    let mean = image.data().iter().sum::<f64>() / n;
    let var = image.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-6);
    image.map(|v| (v - mean) * inv)
}
