//! Small translation-equivariant convolutional stack standing in for a
//! pretrained backbone: 3x3 conv (3->8), ReLU, 2x2 average pool, 3x3 conv
//! (8->16), ReLU, 2x2 average pool, 3x3 conv (16->16), ReLU. Bias-free, total
//! stride 4. Parameters are drawn once from a seeded He-normal scheme and stay
//! frozen during training.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensornet::{gemm, Tensor};

pub const INPUT_CHANNELS: usize = 3;
pub const FEATURE_CHANNELS: usize = 16;
pub const FEATURE_STRIDE: usize = 4;
const WIDTHS: [usize; 4] = [INPUT_CHANNELS, 8, 16, FEATURE_CHANNELS];

/// 3x3 same-padded convolution weights `[out, in, 3, 3]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weights: Tensor,
}

impl ConvLayer {
    pub fn random<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / (9 * c_in) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..c_out * c_in * 9).map(|_| normal.sample(rng)).collect();
        Self {
            weights: Tensor::new(vec![c_out, c_in, 3, 3], data).expect("consistent shape"),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.weights.shape()[0], self.weights.shape()[1])
    }

    /// Convolution followed by ReLU on a `[in, h, w]` buffer.
    fn forward_relu(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (c_out, c_in) = self.dims();
        let hw = h * w;
        let k = c_in * 9;
        let mut cols = vec![0.0; k * hw];
        for ci in 0..c_in {
            let plane = &input[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &plane[sy as usize * w..][..w];
                        let dst = &mut row[y * w..][..w];
                        for x in 0..w {
                            let sx = x as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                dst[x] = src[sx as usize];
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; c_out * hw];
        gemm(c_out, k, hw, self.weights.data(), (k, 1), &cols, (hw, 1), &mut out, (hw, 1), 0.0);
        for v in &mut out {
            *v = v.max(0.0);
        }
        out
    }
}

fn avg_pool2(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let p = &input[ci * h * w..(ci + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let s = p[2 * y * w + 2 * x]
                    + p[2 * y * w + 2 * x + 1]
                    + p[(2 * y + 1) * w + 2 * x]
                    + p[(2 * y + 1) * w + 2 * x + 1];
                out.push(0.25 * s);
            }
        }
    }
    (out, oh, ow)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
}

impl Backbone {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            conv1: ConvLayer::random(WIDTHS[0], WIDTHS[1], rng),
            conv2: ConvLayer::random(WIDTHS[1], WIDTHS[2], rng),
            conv3: ConvLayer::random(WIDTHS[2], WIDTHS[3], rng),
        }
    }

    pub fn layers(&self) -> [&ConvLayer; 3] {
        [&self.conv1, &self.conv2, &self.conv3]
    }

    pub fn layers_mut(&mut self) -> [&mut ConvLayer; 3] {
        [&mut self.conv1, &mut self.conv2, &mut self.conv3]
    }

    /// `[3, H, W]` image to `[16, H/4, W/4]` features.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w) = match *image.shape() {
            [c, h, w] if c == INPUT_CHANNELS && h >= FEATURE_STRIDE && w >= FEATURE_STRIDE => (h, w),
            ref s => {
                return Err(Error::ShapeMismatch(format!(
                    "backbone expects a [3, H>=4, W>=4] image, got {s:?}"
                )))
            }
        };
        let x = self.conv1.forward_relu(image.data(), h, w);
        let (x, h, w) = avg_pool2(&x, WIDTHS[1], h, w);
        let x = self.conv2.forward_relu(&x, h, w);
        let (x, h, w) = avg_pool2(&x, WIDTHS[2], h, w);
        let x = self.conv3.forward_relu(&x, h, w);
        Tensor::new(vec![FEATURE_CHANNELS, h, w], x)
    }
}

/// Per-modality feature maps sharing shape and stride.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStreamFeatures {
    pub reference: Tensor,
    pub sensed: Tensor,
    /// Image pixels per feature cell.
    pub stride: f64,
}

/// Run each stream's backbone on its own image.
pub fn extract_features(
    reference_image: &Tensor,
    sensed_image: &Tensor,
    reference_backbone: &Backbone,
    sensed_backbone: &Backbone,
) -> Result<TwoStreamFeatures> {
    if reference_image.shape() != sensed_image.shape() {
        return Err(Error::ShapeMismatch(format!(
            "reference image {:?} vs sensed image {:?}",
            reference_image.shape(),
            sensed_image.shape()
        )));
    }
    Ok(TwoStreamFeatures {
        reference: reference_backbone.forward(reference_image)?,
        sensed: sensed_backbone.forward(sensed_image)?,
        stride: FEATURE_STRIDE as f64,
    })
}
