//! Frame-level inference: scripted proposals, batched region heads, box
//! decoding and per-frame suppression.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::TwoStreamFeatures;
use super::boxcoder::decode_box_deltas;
use super::proposals::{aggregate_proposals, scripted_proposals, ProposalConfig};
use super::ArcnnModel;
use crate::annot::{Detection, Modality};
use crate::error::{Error, Result};
use crate::eval::{Detector, MultiDetector};
use crate::exec::stream_seed;
use crate::geom::{nms, BBox};
use crate::synthtrain::SceneFrame;

const PROPOSAL_STREAM: u64 = 0x9209;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub proposals: ProposalConfig,
    pub nms_threshold: f64,
    pub max_detections: usize,
    /// Proposal draws for frame `i` use a stream derived from `(seed, i)`,
    /// so every shift mode sees the same draws.
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            proposals: ProposalConfig::default(),
            nms_threshold: 0.5,
            max_detections: 50,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn frame_proposals(&self, frame: &SceneFrame, index: usize) -> Result<Vec<BBox>> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, PROPOSAL_STREAM, index as u64));
        let (r, s) = scripted_proposals(&frame.annotation, &frame.clutter, &self.proposals, &mut rng)?;
        Ok(aggregate_proposals(&r, &s, self.proposals.nms_threshold)
            .into_iter()
            .map(|(b, _)| b)
            .collect())
    }
}

fn clip(b: &BBox, bounds: (f64, f64)) -> BBox {
    let x0 = b.x_min().max(0.0);
    let y0 = b.y_min().max(0.0);
    let x1 = b.x_max().min(bounds.0);
    let y1 = b.y_max().min(bounds.1);
    BBox::from_corners(x0, y0, x1, y1).unwrap_or(*b)
}

fn run_model(
    model: &ArcnnModel,
    config: &DetectorConfig,
    features: &TwoStreamFeatures,
    frame: &SceneFrame,
    proposals: &[BBox],
) -> Result<Vec<Detection>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let bounds = frame.bounds();
    let f = model.forward_batch(features, bounds, proposals, None, false)?;
    let mut scored = Vec::with_capacity(f.n);
    for (i, p) in proposals.iter().enumerate() {
        let b = clip(&decode_box_deltas(p, &f.deltas(i))?, bounds);
        let s = f.score(i);
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("score in frame '{}'", frame.annotation.frame_id)));
        }
        scored.push((b, s));
    }
    Ok(nms(&scored, config.nms_threshold)
        .into_iter()
        .take(config.max_detections)
        .map(|k| Detection {
            frame_id: frame.annotation.frame_id.clone(),
            bbox: scored[k].0,
            score: scored[k].1,
            modality: Modality::Reference,
        })
        .collect())
}

/// A trained model plus its inference settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcnnDetector {
    pub model: ArcnnModel,
    pub config: DetectorConfig,
}

impl ArcnnDetector {
    pub fn new(model: ArcnnModel, config: DetectorConfig) -> Self {
        Self { model, config }
    }
}

impl Detector for ArcnnDetector {
    fn detect(&self, frame: &SceneFrame, index: usize) -> Result<Vec<Detection>> {
        let features = self.model.features(&frame.reference, &frame.sensed)?;
        let proposals = self.config.frame_proposals(frame, index)?;
        run_model(&self.model, &self.config, &features, frame, &proposals)
    }
}

/// Several models evaluated on shared proposals. Feature maps are computed
/// once per distinct backbone pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorBank {
    pub models: Vec<ArcnnModel>,
    pub config: DetectorConfig,
    /// `backbone_group[k]`: first model index with the same backbones as model `k`.
    backbone_group: Vec<usize>,
}

impl DetectorBank {
    pub fn new(models: Vec<ArcnnModel>, config: DetectorConfig) -> Self {
        let backbone_group = (0..models.len())
            .map(|k| {
                (0..k)
                    .find(|&j| {
                        models[j].backbone_reference == models[k].backbone_reference
                            && models[j].backbone_sensed == models[k].backbone_sensed
                    })
                    .unwrap_or(k)
            })
            .collect();
        Self {
            models,
            config,
            backbone_group,
        }
    }
}

impl MultiDetector for DetectorBank {
    fn outputs(&self) -> usize {
        self.models.len()
    }

    fn detect_all(&self, frame: &SceneFrame, index: usize) -> Result<Vec<Vec<Detection>>> {
        let proposals = self.config.frame_proposals(frame, index)?;
        let mut cache: Vec<Option<TwoStreamFeatures>> = vec![None; self.models.len()];
        let mut out = Vec::with_capacity(self.models.len());
        for (k, m) in self.models.iter().enumerate() {
            let g = self.backbone_group[k];
            if cache[g].is_none() {
                cache[g] = Some(m.features(&frame.reference, &frame.sensed)?);
            }
            let features = cache[g].as_ref().expect("filled");
            out.push(run_model(m, &self.config, features, frame, &proposals)?);
        }
        Ok(out)
    }
}
