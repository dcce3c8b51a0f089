//! SGD with momentum and weight decay over the total detection loss.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sampling::{apply_roi_jitter, sample_minibatch};
use super::{SceneFrame, TrainConfig};
use crate::arcnn::{aggregate_proposals, scripted_proposals, ArcnnModel, FusionMode, Heads, LossTerms};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geom::BBox;

/// Momentum buffers for the trainable heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Heads,
}

impl Sgd {
    pub fn new(heads: &Heads, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: heads.zeros_like(),
        }
    }

    /// `v = mu v + g + wd w` (decay on weights, not biases); `w -= lr v`.
    /// `active[k]` selects heads in order rfa, conf_reference, conf_sensed, detect.
    pub fn step(&mut self, heads: &mut Heads, grads: &Heads, lr: f64, active: [bool; 4]) {
        let params = heads.layers_mut();
        let vel = self.velocity.layers_mut();
        let grads = grads.layers();
        for (k, ((p, v), g)) in params.into_iter().zip(vel).zip(grads).enumerate() {
            if !active[k / 2] {
                continue;
            }
            let wd = self.weight_decay;
            for ((w, vv), gg) in p
                .weights
                .data_mut()
                .iter_mut()
                .zip(v.weights.data_mut())
                .zip(g.weights.data())
            {
                *vv = self.momentum * *vv + gg + wd * *w;
                *w -= lr * *vv;
            }
            for ((b, vv), gg) in p.bias.data_mut().iter_mut().zip(v.bias.data_mut()).zip(g.bias.data()) {
                *vv = self.momentum * *vv + gg;
                *b -= lr * *vv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub learning_rate: f64,
    pub rois: usize,
    pub loss: LossTerms,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<IterationRecord>,
    /// Batches that found no eligible negatives.
    pub positives_only_batches: usize,
    /// Frames skipped because no proposal was eligible.
    pub empty_batches: usize,
}

fn active_heads(model: &ArcnnModel) -> [bool; 4] {
    let caf = model.config.fusion == FusionMode::ConfidenceAware;
    [model.config.enable_rfa, caf, caf, true]
}

/// Train the heads of `model` on `dataset`. Backbones stay frozen, so their
/// features are computed once per frame.
pub fn train<R: Rng + ?Sized>(
    mut model: ArcnnModel,
    dataset: &[SceneFrame],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(ArcnnModel, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset has no frames".into()));
    }
    if model.config.enable_rfa != config.enable_rfa || model.config.fusion != config.fusion {
        return Err(Error::InvalidArgument(format!(
            "model variant (rfa={}, fusion={:?}) does not match training config (rfa={}, fusion={:?})",
            model.config.enable_rfa, model.config.fusion, config.enable_rfa, config.fusion
        )));
    }
    let mirrored: Vec<SceneFrame> = if config.horizontal_flip {
        Execution::default().map(dataset, |_, f| f.flipped())
    } else {
        Vec::new()
    };
    let features = Execution::default().try_map(dataset, |_, f| model.features(&f.reference, &f.sensed))?;
    let mirrored_features =
        Execution::default().try_map(&mirrored, |_, f| model.features(&f.reference, &f.sensed))?;
    let active = active_heads(&model);
    let mut sgd = Sgd::new(&model.heads, config.momentum, config.weight_decay);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut iteration = 0;
    for epoch in 0..config.epochs {
        let lr = if epoch >= config.decay_epoch {
            config.learning_rate * 0.1
        } else {
            config.learning_rate
        };
        order.shuffle(rng);
        for &fi in &order {
            let flip = config.horizontal_flip && rng.random_bool(0.5);
            let (frame, feat) = if flip {
                (&mirrored[fi], &mirrored_features[fi])
            } else {
                (&dataset[fi], &features[fi])
            };
            let (rp, sp) = scripted_proposals(&frame.annotation, &frame.clutter, &config.proposals, rng)?;
            let proposals: Vec<BBox> = aggregate_proposals(&rp, &sp, config.proposals.nms_threshold)
                .into_iter()
                .map(|(b, _)| b)
                .collect();
            if proposals.is_empty() {
                report.empty_batches += 1;
                continue;
            }
            let mb = sample_minibatch(&proposals, &frame.annotation, config, rng)?;
            if mb.rois.is_empty() {
                report.empty_batches += 1;
                continue;
            }
            report.positives_only_batches += usize::from(mb.positives_only);
            let batch = apply_roi_jitter(&mb.rois, config.effective_jitter(), rng)?;
            let (loss, grads) = model.loss_and_grad_with(feat, frame.bounds(), &batch, config.lambda, config.gradient_flow)?;
            let total = loss.total(config.lambda);
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { iteration });
            }
            sgd.step(&mut model.heads, &grads, lr, active);
            report.trace.push(IterationRecord {
                epoch,
                iteration,
                learning_rate: lr,
                rois: batch.len(),
                loss,
                total,
            });
            iteration += 1;
        }
    }
    Ok((model, report))
}
