//! Batched region forward pass, loss terms and their analytic gradients.

use serde::{Deserialize, Serialize};

use super::backbone::TwoStreamFeatures;
use super::heads::{context_region, ConfidenceWeights, FusionMode, DETECT_OUTPUTS};
use super::{ArcnnModel, Heads};
use crate::error::{Error, Result};
use crate::geom::{apply_shift, BBox, ShiftTarget};
use crate::tensornet::{
    cross_entropy2, roi_align_into, roi_align_translation_grad, smooth_l1, smooth_l1_grad,
    softmax2, FeatureView,
};

/// One sampled region with its supervision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingRoi {
    /// Proposal in reference image coordinates.
    pub roi: BBox,
    /// Sensed-side region; equal to `roi` unless jittered.
    pub sensed_roi: BBox,
    /// 1 for pedestrian, 0 for background (reference modality).
    pub label: usize,
    /// 1 when the matched object is visible in the sensed modality.
    pub sensed_label: usize,
    /// Shift from `sensed_roi` to the sensed ground truth, for paired positives.
    pub shift_target: Option<ShiftTarget>,
    /// Encoded reference box deltas, for positives.
    pub reg_target: Option<[f64; 4]>,
}

impl TrainingRoi {
    pub fn background(roi: BBox) -> Self {
        Self {
            roi,
            sensed_roi: roi,
            label: 0,
            sensed_label: 0,
            shift_target: None,
            reg_target: None,
        }
    }
}

/// Loss components of one batch. `total` applies `lambda` to the shift term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: f64,
    /// Auxiliary cross-entropy of the confidence branches (confidence-aware fusion only).
    pub confidence: f64,
    pub shift: f64,
    pub reg: f64,
}

impl LossTerms {
    pub fn total(&self, lambda: f64) -> f64 {
        total_loss(self.cls + self.confidence, self.shift, self.reg, lambda)
    }
}

/// `L_cls + lambda * L_shift + L_reg`.
pub fn total_loss(cls: f64, shift: f64, reg: f64, lambda: f64) -> f64 {
    cls + lambda * shift + reg
}

/// Mean two-class cross-entropy.
pub fn classification_loss(logits: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    check_aligned(logits.len(), labels.len())?;
    if logits.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &l)| cross_entropy2(z[0], z[1], l).0)
        .sum();
    Ok(sum / logits.len() as f64)
}

/// Smooth-L1 shift loss over positive RoIs that carry a target, normalized by
/// their count. Zero when there are none.
pub fn shift_loss(
    predicted: &[ShiftTarget],
    targets: &[Option<ShiftTarget>],
    labels: &[usize],
) -> Result<f64> {
    check_aligned(predicted.len(), targets.len())?;
    check_aligned(predicted.len(), labels.len())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, t), &l) in predicted.iter().zip(targets).zip(labels) {
        if let (1, Some(t)) = (l, t) {
            sum += smooth_l1(p.tx - t.tx) + smooth_l1(p.ty - t.ty);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Smooth-L1 box regression over positives, normalized by their count.
pub fn regression_loss(
    predicted: &[[f64; 4]],
    targets: &[Option<[f64; 4]>],
    labels: &[usize],
) -> Result<f64> {
    check_aligned(predicted.len(), targets.len())?;
    check_aligned(predicted.len(), labels.len())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, t), &l) in predicted.iter().zip(targets).zip(labels) {
        if let (1, Some(t)) = (l, t) {
            sum += p.iter().zip(t).map(|(a, b)| smooth_l1(a - b)).sum::<f64>();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("list lengths differ: {a} vs {b}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct ConfidenceCache {
    hidden_reference: Vec<f64>,
    logits_reference: Vec<f64>,
    hidden_sensed: Vec<f64>,
    logits_sensed: Vec<f64>,
}

/// Intermediate values of a batched forward pass over `n` regions.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub n: usize,
    pub shifts: Vec<ShiftTarget>,
    /// Sensed-side regions the aligned features were pooled from.
    pub aligned: Vec<BBox>,
    pub weights: Vec<ConfidenceWeights>,
    /// Rows of `[z0, z1, d0, d1, d2, d3]`.
    pub outputs: Vec<f64>,
    rfa_input: Vec<f64>,
    rfa_hidden: Vec<f64>,
    pooled_reference: Vec<f64>,
    pooled_sensed: Vec<f64>,
    grad_x: Vec<f64>,
    grad_y: Vec<f64>,
    confidence: Option<ConfidenceCache>,
    fused: Vec<f64>,
    detect_hidden: Vec<f64>,
}

impl BatchForward {
    pub fn logits(&self, i: usize) -> [f64; 2] {
        let o = &self.outputs[i * DETECT_OUTPUTS..];
        [o[0], o[1]]
    }

    pub fn deltas(&self, i: usize) -> [f64; 4] {
        let o = &self.outputs[i * DETECT_OUTPUTS..];
        [o[2], o[3], o[4], o[5]]
    }

    /// Pedestrian probability of region `i`.
    pub fn score(&self, i: usize) -> f64 {
        let z = self.logits(i);
        softmax2(z[0], z[1]).1
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient paths into the alignment head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientFlow {
    /// Exact gradient of the total loss, including the path through the
    /// sampling positions of the aligned sensed pooling.
    #[default]
    Full,
    /// The alignment head learns from the shift loss only; sampling
    /// positions are treated as constants.
    DetachSampling,
}

impl ArcnnModel {
    /// Forward pass for `n` regions. `sensed_rois` defaults to `rois`.
    /// With `keep_grads` the translation derivatives of the sensed pooling are
    /// retained for [`ArcnnModel::loss_and_grad`].
    pub fn forward_batch(
        &self,
        features: &TwoStreamFeatures,
        image_bounds: (f64, f64),
        rois: &[BBox],
        sensed_rois: Option<&[BBox]>,
        keep_grads: bool,
    ) -> Result<BatchForward> {
        let cfg = &self.config;
        let heads = &self.heads;
        let n = rois.len();
        let sensed_rois = sensed_rois.unwrap_or(rois);
        check_aligned(n, sensed_rois.len())?;
        let (k, spb, s) = (cfg.pooled_size, cfg.samples_per_bin, features.stride);
        let p = cfg.pooled_len();
        let fr = FeatureView::new(&features.reference)?;
        let fs = FeatureView::new(&features.sensed)?;
        if fr.channels * k * k != p || fs.channels * k * k != p {
            return Err(Error::ShapeMismatch(format!(
                "feature channels {} / {} do not match the model",
                fr.channels, fs.channels
            )));
        }

        let (rfa_input, rfa_hidden, shifts) = if cfg.enable_rfa && n > 0 {
            let mut input = vec![0.0; n * 2 * p];
            for (i, row) in input.chunks_exact_mut(2 * p).enumerate() {
                let cr = context_region(&rois[i], cfg.context_factor, image_bounds)?.scaled_down(s);
                let cs = context_region(&sensed_rois[i], cfg.context_factor, image_bounds)?
                    .scaled_down(s);
                let (a, b) = row.split_at_mut(p);
                roi_align_into(fr, &cr, k, k, spb, a);
                roi_align_into(fs, &cs, k, k, spb, b);
            }
            let (h, y) = heads.rfa.forward_rows(&input, n);
            let shifts = y.chunks_exact(2).map(|t| ShiftTarget::new(t[0], t[1])).collect();
            (input, h, shifts)
        } else {
            (Vec::new(), Vec::new(), vec![ShiftTarget::ZERO; n])
        };
        let aligned: Vec<BBox> = sensed_rois
            .iter()
            .zip(&shifts)
            .map(|(b, t)| apply_shift(b, *t))
            .collect();

        let mut pooled_reference = vec![0.0; n * p];
        let mut pooled_sensed = vec![0.0; n * p];
        let track = keep_grads && cfg.enable_rfa;
        let (mut grad_x, mut grad_y) = if track {
            (vec![0.0; n * p], vec![0.0; n * p])
        } else {
            (Vec::new(), Vec::new())
        };
        for i in 0..n {
            let r = i * p..(i + 1) * p;
            roi_align_into(fr, &rois[i].scaled_down(s), k, k, spb, &mut pooled_reference[r.clone()]);
            let a = aligned[i].scaled_down(s);
            if track {
                roi_align_translation_grad(
                    fs,
                    &a,
                    k,
                    k,
                    spb,
                    &mut pooled_sensed[r.clone()],
                    &mut grad_x[r.clone()],
                    &mut grad_y[r],
                );
            } else {
                roi_align_into(fs, &a, k, k, spb, &mut pooled_sensed[r]);
            }
        }

        let (confidence, weights) = match cfg.fusion {
            FusionMode::ConfidenceAware if n > 0 => {
                let (hr, zr) = heads.conf_reference.forward_rows(&pooled_reference, n);
                let (hs, zs) = heads.conf_sensed.forward_rows(&pooled_sensed, n);
                let weights = zr
                    .chunks_exact(2)
                    .zip(zs.chunks_exact(2))
                    .map(|(a, b)| {
                        ConfidenceWeights::from_probabilities(softmax2(a[0], a[1]).1, softmax2(b[0], b[1]).1)
                    })
                    .collect();
                let cache = ConfidenceCache {
                    hidden_reference: hr,
                    logits_reference: zr,
                    hidden_sensed: hs,
                    logits_sensed: zs,
                };
                (Some(cache), weights)
            }
            _ => (None, vec![ConfidenceWeights::UNIT; n]),
        };

        let mut fused = vec![0.0; n * 2 * p];
        for (i, row) in fused.chunks_exact_mut(2 * p).enumerate() {
            let (a, b) = row.split_at_mut(p);
            let r = i * p..(i + 1) * p;
            match cfg.fusion {
                FusionMode::NaiveConcat => {
                    a.copy_from_slice(&pooled_reference[r.clone()]);
                    b.copy_from_slice(&pooled_sensed[r]);
                }
                FusionMode::ConfidenceAware => {
                    let w = weights[i];
                    let ws = w.sensed * w.disagreement;
                    for (o, v) in a.iter_mut().zip(&pooled_reference[r.clone()]) {
                        *o = w.reference * v;
                    }
                    for (o, v) in b.iter_mut().zip(&pooled_sensed[r]) {
                        *o = ws * v;
                    }
                }
            }
        }
        let (detect_hidden, outputs) = if n > 0 {
            heads.detect.forward_rows(&fused, n)
        } else {
            (Vec::new(), Vec::new())
        };

        Ok(BatchForward {
            n,
            shifts,
            aligned,
            weights,
            outputs,
            rfa_input,
            rfa_hidden,
            pooled_reference,
            pooled_sensed,
            grad_x,
            grad_y,
            confidence,
            fused,
            detect_hidden,
        })
    }

    /// Loss terms of a batch without gradients.
    pub fn batch_loss(
        &self,
        features: &TwoStreamFeatures,
        image_bounds: (f64, f64),
        batch: &[TrainingRoi],
    ) -> Result<LossTerms> {
        let rois: Vec<BBox> = batch.iter().map(|r| r.roi).collect();
        let sensed: Vec<BBox> = batch.iter().map(|r| r.sensed_roi).collect();
        let f = self.forward_batch(features, image_bounds, &rois, Some(&sensed), false)?;
        let labels: Vec<usize> = batch.iter().map(|r| r.label).collect();
        let logits: Vec<[f64; 2]> = (0..f.n).map(|i| f.logits(i)).collect();
        let deltas: Vec<[f64; 4]> = (0..f.n).map(|i| f.deltas(i)).collect();
        let reg_targets: Vec<Option<[f64; 4]>> = batch.iter().map(|r| r.reg_target).collect();
        let mut terms = LossTerms {
            cls: classification_loss(&logits, &labels)?,
            reg: regression_loss(&deltas, &reg_targets, &labels)?,
            ..LossTerms::default()
        };
        if self.config.enable_rfa {
            let targets: Vec<Option<ShiftTarget>> = batch.iter().map(|r| r.shift_target).collect();
            terms.shift = shift_loss(&f.shifts, &targets, &labels)?;
        }
        if let Some(c) = &f.confidence {
            let n = f.n as f64;
            for (i, r) in batch.iter().enumerate() {
                let zr = &c.logits_reference[2 * i..2 * i + 2];
                let zs = &c.logits_sensed[2 * i..2 * i + 2];
                terms.confidence += cross_entropy2(zr[0], zr[1], r.label).0 / n;
                terms.confidence += cross_entropy2(zs[0], zs[1], r.sensed_label).0 / n;
            }
        }
        Ok(terms)
    }

    /// Loss terms and gradients of `total(lambda)` with respect to every head
    /// that participates in the configured variant.
    pub fn loss_and_grad(
        &self,
        features: &TwoStreamFeatures,
        image_bounds: (f64, f64),
        batch: &[TrainingRoi],
        lambda: f64,
    ) -> Result<(LossTerms, Heads)> {
        self.loss_and_grad_with(features, image_bounds, batch, lambda, GradientFlow::Full)
    }

    /// [`ArcnnModel::loss_and_grad`] with a choice of how the alignment head
    /// receives gradient.
    pub fn loss_and_grad_with(
        &self,
        features: &TwoStreamFeatures,
        image_bounds: (f64, f64),
        batch: &[TrainingRoi],
        lambda: f64,
        flow: GradientFlow,
    ) -> Result<(LossTerms, Heads)> {
        let cfg = &self.config;
        let heads = &self.heads;
        let mut grads = heads.zeros_like();
        let n = batch.len();
        if n == 0 {
            return Ok((LossTerms::default(), grads));
        }
        let rois: Vec<BBox> = batch.iter().map(|r| r.roi).collect();
        let sensed: Vec<BBox> = batch.iter().map(|r| r.sensed_roi).collect();
        let f = self.forward_batch(features, image_bounds, &rois, Some(&sensed), flow == GradientFlow::Full)?;
        let p = cfg.pooled_len();
        let nf = n as f64;
        let n_reg = batch
            .iter()
            .filter(|r| r.label == 1 && r.reg_target.is_some())
            .count()
            .max(1) as f64;
        let n_shift = batch
            .iter()
            .filter(|r| r.label == 1 && r.shift_target.is_some())
            .count()
            .max(1) as f64;

        let mut terms = LossTerms::default();
        let mut d_out = vec![0.0; n * DETECT_OUTPUTS];
        for (i, r) in batch.iter().enumerate() {
            let z = f.logits(i);
            let (ce, g) = cross_entropy2(z[0], z[1], r.label);
            terms.cls += ce / nf;
            let d = &mut d_out[i * DETECT_OUTPUTS..(i + 1) * DETECT_OUTPUTS];
            d[0] = g[0] / nf;
            d[1] = g[1] / nf;
            if let (1, Some(t)) = (r.label, r.reg_target) {
                for (j, (pv, tv)) in f.deltas(i).iter().zip(t).enumerate() {
                    let e = pv - tv;
                    terms.reg += smooth_l1(e) / n_reg;
                    d[2 + j] = smooth_l1_grad(e) / n_reg;
                }
            }
        }
        let d_fused = heads
            .detect
            .backward_rows(&f.fused, &f.detect_hidden, &d_out, n, &mut grads.detect, true)
            .expect("requested");

        let need_sensed = cfg.enable_rfa && flow == GradientFlow::Full;
        let mut d_sensed = if need_sensed { vec![0.0; n * p] } else { Vec::new() };
        match (&f.confidence, cfg.fusion) {
            (Some(c), FusionMode::ConfidenceAware) => {
                let mut dzr = vec![0.0; 2 * n];
                let mut dzs = vec![0.0; 2 * n];
                for (i, r) in batch.iter().enumerate() {
                    let w = f.weights[i];
                    let row = &d_fused[i * 2 * p..(i + 1) * 2 * p];
                    let (dfr, dfs) = row.split_at(p);
                    let pr = &f.pooled_reference[i * p..(i + 1) * p];
                    let ps = &f.pooled_sensed[i * p..(i + 1) * p];
                    let d_wr = dot(dfr, pr);
                    let d_wsd = dot(dfs, ps);
                    let d_ws = d_wsd * w.disagreement;
                    let d_wd = d_wsd * w.sensed;
                    if need_sensed {
                        let scale = w.sensed * w.disagreement;
                        for (o, v) in d_sensed[i * p..(i + 1) * p].iter_mut().zip(dfs) {
                            *o = scale * v;
                        }
                    }
                    let (p1r, p1s) = (w.p1_reference, w.p1_sensed);
                    let sd = sign(p1r - p1s);
                    let dp1r = 2.0 * sign(2.0 * p1r - 1.0) * d_wr - sd * d_wd;
                    let dp1s = 2.0 * sign(2.0 * p1s - 1.0) * d_ws + sd * d_wd;
                    let jr = dp1r * p1r * (1.0 - p1r);
                    let js = dp1s * p1s * (1.0 - p1s);
                    let zr = &c.logits_reference[2 * i..2 * i + 2];
                    let zs = &c.logits_sensed[2 * i..2 * i + 2];
                    let (cer, gr) = cross_entropy2(zr[0], zr[1], r.label);
                    let (ces, gs) = cross_entropy2(zs[0], zs[1], r.sensed_label);
                    terms.confidence += (cer + ces) / nf;
                    dzr[2 * i] = -jr + gr[0] / nf;
                    dzr[2 * i + 1] = jr + gr[1] / nf;
                    dzs[2 * i] = -js + gs[0] / nf;
                    dzs[2 * i + 1] = js + gs[1] / nf;
                }
                heads.conf_reference.backward_rows(
                    &f.pooled_reference,
                    &c.hidden_reference,
                    &dzr,
                    n,
                    &mut grads.conf_reference,
                    false,
                );
                if let Some(dx) = heads.conf_sensed.backward_rows(
                    &f.pooled_sensed,
                    &c.hidden_sensed,
                    &dzs,
                    n,
                    &mut grads.conf_sensed,
                    need_sensed,
                ) {
                    for (o, v) in d_sensed.iter_mut().zip(dx) {
                        *o += v;
                    }
                }
            }
            _ => {
                if need_sensed {
                    for (i, row) in d_fused.chunks_exact(2 * p).enumerate() {
                        d_sensed[i * p..(i + 1) * p].copy_from_slice(&row[p..]);
                    }
                }
            }
        }

        if cfg.enable_rfa {
            let s = features.stride;
            let mut d_t = vec![0.0; 2 * n];
            for (i, r) in batch.iter().enumerate() {
                let t = f.shifts[i];
                if let (1, Some(target)) = (r.label, r.shift_target) {
                    let (ex, ey) = (t.tx - target.tx, t.ty - target.ty);
                    terms.shift += (smooth_l1(ex) + smooth_l1(ey)) / n_shift;
                    d_t[2 * i] += lambda * smooth_l1_grad(ex) / n_shift;
                    d_t[2 * i + 1] += lambda * smooth_l1_grad(ey) / n_shift;
                }
                if !need_sensed {
                    continue;
                }
                let ds = &d_sensed[i * p..(i + 1) * p];
                d_t[2 * i] += r.sensed_roi.width() / s * dot(ds, &f.grad_x[i * p..(i + 1) * p]);
                d_t[2 * i + 1] += r.sensed_roi.height() / s * dot(ds, &f.grad_y[i * p..(i + 1) * p]);
            }
            heads
                .rfa
                .backward_rows(&f.rfa_input, &f.rfa_hidden, &d_t, n, &mut grads.rfa, false);
        }
        Ok((terms, grads))
    }
}
