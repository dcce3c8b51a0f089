//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use arcnn::annot::{Detection, EvalFrame, FrameAnnotation, Modality, PairedObject};
use arcnn::arcnn::{ArcnnModel, FusionMode, ModelConfig, TrainingRoi, TwoStreamFeatures, FEATURE_CHANNELS};
use arcnn::geom::{apply_shift, BBox, ShiftTarget};
use arcnn::arcnn::MlpHead;
use arcnn::tensornet::{grad_check, FcLayer, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// IoU from corner coordinates, written without the library helpers.
pub fn corner_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = (a.x_min(), a.y_min(), a.x_min() + a.width(), a.y_min() + a.height());
    let (bx0, by0, bx1, by1) = (b.x_min(), b.y_min(), b.x_min() + b.width(), b.y_min() + b.height());
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    inter / (a.width() * a.height() + b.width() * b.height() - inter)
}

/// Quadratic greedy suppression: repeatedly take the best remaining box
/// (lowest index on ties) and drop everything overlapping it above `thr`.
pub fn nms_oracle(boxes: &[(BBox, f64)], thr: f64) -> Vec<usize> {
    let mut alive = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| boxes[i].1 > boxes[b].1) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && corner_iou(&boxes[i].0, &boxes[b].0) > thr {
                alive[i] = false;
            }
        }
    }
    kept
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f64) -> BBox {
    BBox::new(
        rng.random_range(0.0..extent),
        rng.random_range(0.0..extent),
        rng.random_range(1.0..extent / 2.0),
        rng.random_range(1.0..extent / 2.0),
    )
    .unwrap()
}

/// `[1, h, w]` map whose cell `(y, x)` holds `a + b x + c y`.
pub fn linear_map(h: usize, w: usize, a: f64, b: f64, c: f64) -> Tensor {
    let data = (0..h)
        .flat_map(|y| (0..w).map(move |x| a + b * x as f64 + c * y as f64))
        .collect();
    Tensor::new(vec![1, h, w], data).unwrap()
}

/// Bin averages of the field `a + b x + c y` over each of the `k x k` bins
/// of `roi`, by midpoint quadrature on a `n x n` sub-grid per bin.
pub fn supersampled_bins(roi: &BBox, k: usize, n: usize, a: f64, b: f64, c: f64) -> Vec<f64> {
    let (bw, bh) = (roi.width() / k as f64, roi.height() / k as f64);
    let mut out = Vec::with_capacity(k * k);
    for by in 0..k {
        for bx in 0..k {
            let mut acc = 0.0;
            for sy in 0..n {
                let y = roi.y_min() + bh * (by as f64 + (sy as f64 + 0.5) / n as f64);
                for sx in 0..n {
                    let x = roi.x_min() + bw * (bx as f64 + (sx as f64 + 0.5) / n as f64);
                    acc += a + b * x + c * y;
                }
            }
            out.push(acc / (n * n) as f64);
        }
    }
    out
}

/// Ground truth of one frame for `modality`: boxes and ignore marks.
pub fn oracle_gt(frame: &EvalFrame, modality: Modality) -> Vec<(BBox, bool)> {
    let other = match modality {
        Modality::Reference => Modality::Sensed,
        Modality::Sensed => Modality::Reference,
    };
    frame
        .annotation
        .objects
        .iter()
        .zip(&frame.ignore)
        .map(|(o, &ig)| match o.box_in(modality) {
            Some(b) => (*b, ig),
            None => (*o.box_in(other).unwrap(), true),
        })
        .collect()
}

/// `(true positives, false positives)` of one frame's kept detections,
/// matched greedily in descending score order.
fn frame_counts(dets: &[(BBox, f64)], gt: &[(BBox, bool)]) -> (usize, usize) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].1.total_cmp(&dets[i].1));
    let mut used = vec![false; gt.len()];
    let (mut tp, mut fp) = (0, 0);
    for i in order {
        let mut best: Option<(f64, usize)> = None;
        for (g, (gb, _)) in gt.iter().enumerate() {
            let v = corner_iou(&dets[i].0, gb);
            if !used[g] && v >= 0.5 && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, g));
            }
        }
        match best {
            Some((_, g)) => {
                used[g] = true;
                if !gt[g].1 {
                    tp += 1;
                }
            }
            None => fp += 1,
        }
    }
    (tp, fp)
}

/// Log-average miss rate by exhaustive threshold enumeration: every distinct
/// score (plus "keep nothing") is tried as a cutoff, each frame is re-matched
/// from scratch, and each FPPI sample takes the lowest miss rate reachable
/// without exceeding it.
pub fn threshold_oracle_mr(frames: &[EvalFrame], dets: &[Detection], modality: Modality) -> f64 {
    let gts: Vec<Vec<(BBox, bool)>> = frames.iter().map(|f| oracle_gt(f, modality)).collect();
    let n_gt: usize = gts.iter().flatten().filter(|g| !g.1).count();
    let mut cutoffs: Vec<f64> = dets.iter().map(|d| d.score).collect();
    cutoffs.push(f64::INFINITY);
    let mut points = Vec::new();
    for &t in &cutoffs {
        let (mut tp, mut fp) = (0, 0);
        for (f, gt) in frames.iter().zip(&gts) {
            let kept: Vec<(BBox, f64)> = dets
                .iter()
                .filter(|d| d.frame_id == f.annotation.frame_id && d.score >= t)
                .map(|d| (d.bbox, d.score))
                .collect();
            let (a, b) = frame_counts(&kept, gt);
            tp += a;
            fp += b;
        }
        points.push((fp as f64 / frames.len() as f64, 1.0 - tp as f64 / n_gt as f64));
    }
    let logs: f64 = (0..9)
        .map(|i| {
            let r = 10f64.powf(-2.0 + 0.25 * i as f64);
            let m = points
                .iter()
                .filter(|p| p.0 <= r)
                .map(|p| p.1)
                .fold(1.0, f64::min);
            m.max(1e-4).ln()
        })
        .sum();
    (logs / 9.0).exp()
}

pub fn perturb(b: &BBox, amount: f64, rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        b.x_min() + rng.random_range(-amount..amount) * b.width(),
        b.y_min() + rng.random_range(-amount..amount) * b.height(),
        b.width() * rng.random_range(0.8..1.25),
        b.height() * rng.random_range(0.8..1.25),
    )
    .unwrap()
}

/// Up to 10 frames with paired, unpaired and ignored objects, and detections
/// mixing near-hits, duplicates and clutter. Scores are distinct.
pub fn eval_fixture(rng: &mut ChaCha8Rng) -> (Vec<EvalFrame>, Vec<Detection>) {
    let n_frames = rng.random_range(1..=10);
    let mut frames = Vec::new();
    let mut dets = Vec::new();
    for f in 0..n_frames {
        let id = format!("f{f}");
        let mut objects = Vec::new();
        let mut ignore = Vec::new();
        for k in 0..rng.random_range(0..=5) {
            let r = BBox::new(rng.random_range(0.0..200.0), rng.random_range(0.0..100.0), 20.0, 45.0).unwrap();
            let s = r.translated(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let uid = (f * 10 + k) as u64;
            objects.push(match rng.random_range(0..8) {
                0 => PairedObject::only_in(uid, Modality::Reference, r),
                1 => PairedObject::only_in(uid, Modality::Sensed, s),
                _ => PairedObject::paired(uid, r, s),
            });
            ignore.push(rng.random_bool(0.15));
        }
        for o in &objects {
            let b = *o.any_box();
            for _ in 0..rng.random_range(0..3) {
                dets.push((id.clone(), perturb(&b, 0.15, rng)));
            }
        }
        for _ in 0..rng.random_range(0..4) {
            let b = BBox::new(rng.random_range(0.0..200.0), rng.random_range(0.0..100.0), 20.0, 45.0).unwrap();
            dets.push((id.clone(), b));
        }
        frames.push(EvalFrame {
            annotation: FrameAnnotation {
                frame_id: id,
                image_size: [256, 160],
                objects,
            },
            ignore,
        });
    }
    let dets = dets
        .into_iter()
        .map(|(frame_id, bbox)| Detection {
            frame_id,
            bbox,
            score: rng.random_range(0.0..1.0),
            modality: Modality::Reference,
        })
        .collect();
    (frames, dets)
}

pub const BOUNDS: (f64, f64) = (48.0, 40.0);
pub const EPS: f64 = 1e-5;

pub fn small_config(enable_rfa: bool, fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        pooled_size: 3,
        samples_per_bin: 2,
        rfa_hidden: 6,
        confidence_hidden: 5,
        detect_hidden: 7,
        enable_rfa,
        fusion,
        ..ModelConfig::default()
    }
}

fn random_map(rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (10, 12);
    let d = (0..FEATURE_CHANNELS * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new(vec![FEATURE_CHANNELS, h, w], d).unwrap()
}

pub fn grad_fixture(seed: u64, config: ModelConfig) -> (ArcnnModel, TwoStreamFeatures, Vec<TrainingRoi>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ArcnnModel::new(config, seed).unwrap();
    // Larger output weights so every term carries a visible gradient.
    for name in ["rfa.fc2.weight", "conf_reference.fc2.weight", "conf_sensed.fc2.weight", "detect.fc2.weight"] {
        let t = model.heads.tensor_mut(name).unwrap();
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    for name in ["rfa.fc1.bias", "detect.fc1.bias", "conf_reference.fc1.bias", "conf_sensed.fc1.bias"] {
        for v in model.heads.tensor_mut(name).unwrap().data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    let features = TwoStreamFeatures {
        reference: random_map(&mut rng),
        sensed: random_map(&mut rng),
        stride: 4.0,
    };
    let mut batch = Vec::new();
    for k in 0..4 {
        let roi = BBox::new(
            rng.random_range(6.0..20.0),
            rng.random_range(4.0..12.0),
            rng.random_range(10.0..16.0),
            rng.random_range(16.0..22.0),
        )
        .unwrap();
        let sensed_roi = apply_shift(&roi, ShiftTarget::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)));
        let label = usize::from(k != 2);
        batch.push(TrainingRoi {
            roi,
            sensed_roi,
            label,
            sensed_label: usize::from(k == 0 || k == 1),
            shift_target: (label == 1 && k != 3)
                .then(|| ShiftTarget::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2))),
            reg_target: (label == 1).then(|| std::array::from_fn(|_| rng.random_range(-1.5..1.5))),
        });
    }
    (model, features, batch)
}

/// Maximum relative error over every tensor of the named layers.
pub fn check_layers(model: &ArcnnModel, features: &TwoStreamFeatures, batch: &[TrainingRoi], layers: &[&str]) -> f64 {
    let lambda = 1.0;
    let (_, grads) = model.loss_and_grad(features, BOUNDS, batch, lambda).unwrap();
    let mut worst: f64 = 0.0;
    for layer in layers {
        for part in ["weight", "bias"] {
            let name = format!("{layer}.{part}");
            let at = model.heads.tensor(&name).unwrap().clone();
            let analytic = grads.tensor(&name).unwrap().clone();
            let f = |t: &Tensor| {
                let mut m = model.clone();
                *m.heads.tensor_mut(&name).unwrap() = t.clone();
                m.batch_loss(features, BOUNDS, batch).map(|l| l.total(lambda))
            };
            let e = grad_check(f, &at, &analytic, EPS).unwrap();
            worst = worst.max(e);
        }
    }
    worst
}

pub const C: usize = 4;
pub const H: usize = 24;
pub const W: usize = 32;
pub const STRIDE: f64 = 4.0;

pub fn smooth_map(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let phases: Vec<(f64, f64)> = (0..C).map(|_| (rng.random_range(0.0..6.0), rng.random_range(0.0..6.0))).collect();
    (0..C * H * W)
        .map(|i| {
            let (c, y, x) = (i / (H * W), (i / W) % H, i % W);
            (0.37 * x as f64 + phases[c].0).sin() + (0.23 * y as f64 + phases[c].1).cos()
        })
        .collect()
}

/// Sensed map equal to the reference translated by `cells` along x.
pub fn translated(reference: &[f64], cells: usize) -> Vec<f64> {
    let mut out = vec![0.0; reference.len()];
    for c in 0..C {
        for y in 0..H {
            for x in cells..W {
                out[(c * H + y) * W + x] = reference[(c * H + y) * W + x - cells];
            }
        }
    }
    out
}

/// Head whose output is the constant `(tx, ty)`.
pub fn constant_head(in_dim: usize, tx: f64, ty: f64, rng: &mut ChaCha8Rng) -> MlpHead {
    let fc1 = FcLayer::random(in_dim, 5, 2.0, rng);
    let fc2 = FcLayer::new(Tensor::zeros(vec![2, 5]), Tensor::from_vec(vec![tx, ty]).unwrap()).unwrap();
    MlpHead::new(fc1, fc2).unwrap()
}
