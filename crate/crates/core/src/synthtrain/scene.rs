//! Procedural two-modality scenes with exact per-modality boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annot::{FrameAnnotation, Modality, PairedObject};
use crate::error::{Error, Result};
use crate::exec::{stream_seed, Execution};
use crate::geom::{iou, BBox};
use crate::tensornet::Tensor;

const SCENE_STREAM: u64 = 0x5ce7e;

/// Generator settings. Ranges are inclusive `(min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
    pub objects_per_frame: (u32, u32),
    /// Pedestrian height range in pixels.
    pub object_size: (f64, f64),
    /// Width as a fraction of height.
    pub aspect_ratio: f64,
    /// Per-axis mean of the sensed displacement in pixels.
    pub shift_mean: (f64, f64),
    /// Per-axis standard deviation of the sensed displacement in pixels.
    pub shift_std: (f64, f64),
    pub unpaired_rate: f64,
    /// Probability that a frame's sensed image is rendered in low contrast.
    pub day_night_mix: f64,
    /// Pedestrian-shaped distractors visible in the reference image only.
    pub clutter_per_frame: (u32, u32),
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: (160, 128),
            objects_per_frame: (1, 3),
            object_size: (40.0, 64.0),
            aspect_ratio: 0.45,
            shift_mean: (0.0, 0.0),
            shift_std: (0.0, 0.0),
            unpaired_rate: 0.0,
            day_night_mix: 0.0,
            clutter_per_frame: (0, 0),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let (w, h) = self.image_size;
        if w < 16 || h < 16 {
            return bad(format!("image size {w}x{h} is below 16x16"));
        }
        if self.objects_per_frame.0 > self.objects_per_frame.1
            || self.clutter_per_frame.0 > self.clutter_per_frame.1
        {
            return bad("count ranges need min <= max".into());
        }
        let (lo, hi) = self.object_size;
        if !(lo > 0.0 && lo <= hi && hi < h as f64 && hi * self.aspect_ratio < w as f64) {
            return bad(format!("object size range ({lo}, {hi}) must fit the image"));
        }
        if !(self.aspect_ratio > 0.0) {
            return bad("aspect ratio must be positive".into());
        }
        for (name, p) in [("unpaired_rate", self.unpaired_rate), ("day_night_mix", self.day_night_mix)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let finite = [self.shift_mean.0, self.shift_mean.1, self.shift_std.0, self.shift_std.1];
        if finite.iter().any(|v| !v.is_finite()) || self.shift_std.0 < 0.0 || self.shift_std.1 < 0.0 {
            return bad("shift distribution must be finite with non-negative std".into());
        }
        Ok(())
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.image_size.0 as f64, self.image_size.1 as f64)
    }
}

/// Rendered image pair plus its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub reference: Tensor,
    pub sensed: Tensor,
    pub annotation: FrameAnnotation,
    /// Distractor boxes rendered in the reference image only.
    pub clutter: Vec<BBox>,
    /// Whether the sensed image was rendered in the low-contrast regime.
    pub night: bool,
}

impl SceneFrame {
    pub fn bounds(&self) -> (f64, f64) {
        (self.annotation.image_size[0] as f64, self.annotation.image_size[1] as f64)
    }

    /// Left-right mirror of both images and every box. Pixel `x` covers
    /// `[x, x + 1)`, so a box edge at `x` maps to `width - x`.
    pub fn flipped(&self) -> SceneFrame {
        let w = self.bounds().0;
        let flip_box = |b: &BBox| BBox::new(w - b.x_max(), b.y_min(), b.width(), b.height()).expect("mirrored box stays valid");
        let mut annotation = self.annotation.clone();
        for o in &mut annotation.objects {
            o.reference_box = o.reference_box.as_ref().map(flip_box);
            o.sensed_box = o.sensed_box.as_ref().map(flip_box);
        }
        SceneFrame {
            reference: flip_image(&self.reference),
            sensed: flip_image(&self.sensed),
            annotation,
            clutter: self.clutter.iter().map(flip_box).collect(),
            night: self.night,
        }
    }
}

fn flip_image(t: &Tensor) -> Tensor {
    let w = *t.shape().last().expect("image has a width");
    let mut data = t.data().to_vec();
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

struct Canvas {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            data: vec![0.0; 3 * w * h],
        }
    }

    /// Blend `color` over the axis-aligned rectangle with exact area coverage.
    fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [f64; 3]) {
        let xs = x0.max(0.0).floor() as usize;
        let ys = y0.max(0.0).floor() as usize;
        let xe = (x1.min(self.w as f64).ceil().max(0.0) as usize).min(self.w);
        let ye = (y1.min(self.h as f64).ceil().max(0.0) as usize).min(self.h);
        let plane = self.w * self.h;
        for y in ys..ye {
            let cy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
            if cy == 0.0 {
                continue;
            }
            for x in xs..xe {
                let cx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                let a = cx * cy;
                if a == 0.0 {
                    continue;
                }
                let i = y * self.w + x;
                for (c, col) in color.iter().enumerate() {
                    let v = &mut self.data[c * plane + i];
                    *v += a * (col - *v);
                }
            }
        }
    }

    fn into_tensor(self) -> Tensor {
        let data = self.data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Tensor::new(vec![3, self.h, self.w], data).expect("canvas shape")
    }
}

/// Head, torso and two legs inside `b`.
fn draw_figure(c: &mut Canvas, b: &BBox, head: [f64; 3], torso: [f64; 3], legs: [f64; 3]) {
    let (x, y, w, h) = (b.x_min(), b.y_min(), b.width(), b.height());
    c.fill_rect(x + 0.28 * w, y, x + 0.72 * w, y + 0.2 * h, head);
    c.fill_rect(x, y + 0.2 * h, x + w, y + 0.6 * h, torso);
    c.fill_rect(x + 0.05 * w, y + 0.6 * h, x + 0.42 * w, y + h, legs);
    c.fill_rect(x + 0.58 * w, y + 0.6 * h, x + 0.95 * w, y + h, legs);
}

/// Low-frequency sinusoidal texture plus pixel noise around `base`.
fn textured_background<R: Rng + ?Sized>(
    w: usize,
    h: usize,
    base: [f64; 3],
    amplitude: f64,
    noise: f64,
    rng: &mut R,
) -> Canvas {
    let mut c = Canvas::new(w, h);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.02..0.15),
                rng.random_range(0.02..0.15),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    let plane = w * h;
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves
                .iter()
                .map(|(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum::<f64>()
                / norm;
            for (ch, b) in base.iter().enumerate() {
                let n = if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
                c.data[ch * plane + y * w + x] = b + amplitude * t + n;
            }
        }
    }
    c
}

fn gray(v: f64) -> [f64; 3] {
    [v, v, v]
}

fn place<R: Rng + ?Sized>(cfg: &SceneConfig, taken: &[BBox], margin: f64, rng: &mut R) -> Option<BBox> {
    let (w, h) = cfg.bounds();
    for _ in 0..50 {
        let bh = rng.random_range(cfg.object_size.0..=cfg.object_size.1);
        let bw = bh * cfg.aspect_ratio;
        let x_hi = w - bw - margin;
        let y_hi = h - bh - margin;
        if x_hi <= margin || y_hi <= margin {
            return None;
        }
        let b = BBox::new(rng.random_range(margin..x_hi), rng.random_range(margin..y_hi), bw, bh).ok()?;
        if taken.iter().all(|t| iou(t, &b) < 0.05) {
            return Some(b);
        }
    }
    None
}

/// Render one frame. `frame_index` makes ids and uids unique within a dataset.
pub fn generate_scene<R: Rng + ?Sized>(
    config: &SceneConfig,
    frame_index: usize,
    rng: &mut R,
) -> Result<SceneFrame> {
    config.validate()?;
    let (w, h) = (config.image_size.0 as usize, config.image_size.1 as usize);
    let sx = Normal::new(config.shift_mean.0, config.shift_std.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let sy = Normal::new(config.shift_mean.1, config.shift_std.1).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let night = rng.random_bool(config.day_night_mix);

    let n_obj = rng.random_range(config.objects_per_frame.0..=config.objects_per_frame.1);
    let n_clutter = rng.random_range(config.clutter_per_frame.0..=config.clutter_per_frame.1);
    let mut taken: Vec<BBox> = Vec::new();
    let mut objects = Vec::new();
    for k in 0..n_obj {
        let Some(r) = place(config, &taken, 2.0, rng) else { break };
        taken.push(r);
        let s = r.translated(sx.sample(rng), sy.sample(rng));
        let uid = ((frame_index as u64) << 16) | k as u64;
        let o = if rng.random_bool(config.unpaired_rate) {
            if rng.random_bool(0.5) {
                PairedObject::only_in(uid, Modality::Reference, r)
            } else {
                PairedObject::only_in(uid, Modality::Sensed, s)
            }
        } else {
            PairedObject::paired(uid, r, s)
        };
        objects.push(o);
    }
    let mut clutter = Vec::new();
    for _ in 0..n_clutter {
        let Some(c) = place(config, &taken, 2.0, rng) else { break };
        taken.push(c);
        clutter.push(c);
    }

    // Reference: bright figures on a dim texture.
    let mut reference = textured_background(w, h, gray(0.3), 0.1, 0.03, rng);
    let figure_level = |rng: &mut R| rng.random_range(0.7..0.9);
    for b in &clutter {
        let v = figure_level(rng);
        draw_figure(&mut reference, b, gray(v), gray(v - 0.05), gray(v - 0.1));
    }
    for o in &objects {
        let v = figure_level(rng);
        if let Some(b) = &o.reference_box {
            draw_figure(&mut reference, b, gray(v), gray(v - 0.05), gray(v - 0.1));
        }
    }

    // Sensed: colored figures on a colored texture.
    let bg = [
        rng.random_range(0.35..0.6),
        rng.random_range(0.35..0.6),
        rng.random_range(0.3..0.5),
    ];
    let mut sensed = textured_background(w, h, bg, 0.12, 0.03, rng);
    for o in &objects {
        let shirt = [rng.random_range(0.6..1.0), rng.random_range(0.0..0.4), rng.random_range(0.0..0.5)];
        if let Some(b) = &o.sensed_box {
            draw_figure(&mut sensed, b, [0.95, 0.75, 0.6], shirt, [0.05, 0.05, 0.3]);
        }
    }
    if night {
        let mean: f64 = sensed.data.iter().sum::<f64>() / sensed.data.len() as f64;
        for v in &mut sensed.data {
            *v = 0.1 + 0.25 * (*v - mean) + rng.random_range(-0.05..0.05);
        }
    }

    Ok(SceneFrame {
        reference: reference.into_tensor(),
        sensed: sensed.into_tensor(),
        annotation: FrameAnnotation {
            frame_id: format!("frame{frame_index:05}"),
            image_size: [config.image_size.0, config.image_size.1],
            objects,
        },
        clutter,
        night,
    })
}

/// `frames` scenes, each from its own stream derived from `config.seed`.
pub fn generate_dataset(config: &SceneConfig, frames: usize, exec: Execution) -> Result<Vec<SceneFrame>> {
    config.validate()?;
    let idx: Vec<usize> = (0..frames).collect();
    exec.try_map(&idx, |_, &i| {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, SCENE_STREAM, i as u64));
        generate_scene(config, i, &mut rng)
    })
}
