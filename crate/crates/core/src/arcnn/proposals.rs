//! Scripted region proposals and their cross-modal aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annot::{FrameAnnotation, Modality};
use crate::error::{Error, Result};
use crate::geom::{iou, nms, BBox};

/// Perturbation and sampling settings of the proposal script.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    /// Perturbed copies drawn around every annotated box.
    pub per_object: usize,
    /// Perturbed copies drawn around every clutter box.
    pub per_clutter: usize,
    /// Uniformly placed boxes per frame.
    pub random: usize,
    /// Center noise as a fraction of box size (uniform in `[-c, c]`).
    pub center_noise: f64,
    /// Per-axis scale factor range.
    pub scale_range: (f64, f64),
    /// Random box heights as fractions of the image height.
    pub random_height: (f64, f64),
    pub aspect_ratio: f64,
    pub nms_threshold: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            per_object: 8,
            per_clutter: 4,
            random: 16,
            center_noise: 0.2,
            scale_range: (0.8, 1.25),
            random_height: (0.25, 0.55),
            aspect_ratio: 0.45,
            nms_threshold: 0.7,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        let (hl, hh) = self.random_height;
        if !(self.center_noise >= 0.0)
            || !(lo > 0.0 && lo <= hi)
            || !(hl > 0.0 && hl <= hh)
            || !(self.aspect_ratio > 0.0)
            || !(0.0..=1.0).contains(&self.nms_threshold)
        {
            return Err(Error::InvalidArgument(format!("invalid proposal config {self:?}")));
        }
        Ok(())
    }
}

fn perturb<R: Rng + ?Sized>(b: &BBox, cfg: &ProposalConfig, rng: &mut R) -> Result<(BBox, f64)> {
    let c = cfg.center_noise;
    let (lo, hi) = (cfg.scale_range.0.ln(), cfg.scale_range.1.ln());
    let dx = rng.random_range(-c..=c) * b.width();
    let dy = rng.random_range(-c..=c) * b.height();
    let sw = rng.random_range(lo..=hi).exp();
    let sh = rng.random_range(lo..=hi).exp();
    let p = BBox::from_center(b.center_x() + dx, b.center_y() + dy, b.width() * sw, b.height() * sh)?;
    let score = iou(&p, b);
    Ok((p, score))
}

/// Proposals for the reference and sensed streams. Reference proposals cover
/// reference ground truth, clutter and random boxes; sensed proposals cover
/// sensed ground truth. Scores only order suppression.
pub fn scripted_proposals<R: Rng + ?Sized>(
    frame: &FrameAnnotation,
    clutter: &[BBox],
    config: &ProposalConfig,
    rng: &mut R,
) -> Result<(Vec<(BBox, f64)>, Vec<(BBox, f64)>)> {
    config.validate()?;
    let (w, h) = (frame.image_size[0] as f64, frame.image_size[1] as f64);
    let mut reference = Vec::new();
    let mut sensed = Vec::new();
    for o in &frame.objects {
        for _ in 0..config.per_object {
            if let Some(b) = o.box_in(Modality::Reference) {
                reference.push(perturb(b, config, rng)?);
            }
            if let Some(b) = o.box_in(Modality::Sensed) {
                sensed.push(perturb(b, config, rng)?);
            }
        }
    }
    for c in clutter {
        for _ in 0..config.per_clutter {
            reference.push(perturb(c, config, rng)?);
        }
    }
    for _ in 0..config.random {
        let bh = (rng.random_range(config.random_height.0..=config.random_height.1) * h).min(h);
        let bw = (bh * config.aspect_ratio).min(w);
        let x = rng.random_range(0.0..=(w - bw));
        let y = rng.random_range(0.0..=(h - bh));
        reference.push((BBox::new(x, y, bw, bh)?, rng.random_range(0.0..0.2)));
    }
    Ok((reference, sensed))
}

/// Union of both proposal lists followed by suppression at `iou_threshold`.
pub fn aggregate_proposals(
    reference: &[(BBox, f64)],
    sensed: &[(BBox, f64)],
    iou_threshold: f64,
) -> Vec<(BBox, f64)> {
    let all: Vec<(BBox, f64)> = reference.iter().chain(sensed).copied().collect();
    nms(&all, iou_threshold).into_iter().map(|i| all[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annot::PairedObject;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn one_empty_list_is_plain_nms() {
        let a = vec![(b(0.0, 0.0, 10.0, 10.0), 0.9), (b(1.0, 0.0, 10.0, 10.0), 0.8)];
        let got = aggregate_proposals(&a, &[], 0.5);
        assert_eq!(got, vec![a[0]]);
        assert_eq!(aggregate_proposals(&[], &a, 0.5), got);
    }

    #[test]
    fn duplicate_kept_once() {
        let p = (b(5.0, 5.0, 10.0, 20.0), 0.7);
        assert_eq!(aggregate_proposals(&[p], &[p], 0.7).len(), 1);
    }

    #[test]
    fn scripted_proposals_cover_objects() {
        let frame = FrameAnnotation {
            frame_id: "f".into(),
            image_size: [160, 120],
            objects: vec![
                PairedObject::paired(1, b(20.0, 20.0, 20.0, 44.0), b(23.0, 20.0, 20.0, 44.0)),
                PairedObject::only_in(2, Modality::Sensed, b(90.0, 30.0, 20.0, 44.0)),
            ],
        };
        let cfg = ProposalConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (r, s) = scripted_proposals(&frame, &[], &cfg, &mut rng).unwrap();
        assert_eq!(r.len(), cfg.per_object + cfg.random);
        assert_eq!(s.len(), 2 * cfg.per_object);
        for (p, _) in &r[..cfg.per_object] {
            assert!(iou(p, &b(20.0, 20.0, 20.0, 44.0)) > 0.3);
        }
        for (p, _) in &r[cfg.per_object..] {
            assert!(p.x_min() >= 0.0 && p.x_max() <= 160.0 + 1e-9 && p.y_max() <= 120.0 + 1e-9);
        }
    }
}
