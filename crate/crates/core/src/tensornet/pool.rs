//! Bilinear sampling and RoIAlign pooling.
//!
//! Feature cells have their centers at integer coordinates. Neighbors that
//! fall outside the map contribute zero, so sampled values ramp to zero over
//! the one-cell band around the map.

use super::Tensor;
use crate::error::{Error, Result};
use crate::geom::BBox;

pub const DEFAULT_POOLED_SIZE: usize = 7;
pub const DEFAULT_SAMPLES_PER_BIN: usize = 2;

/// Borrowed `[C, H, W]` feature map.
#[derive(Debug, Clone, Copy)]
pub struct FeatureView<'a> {
    pub data: &'a [f64],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl<'a> FeatureView<'a> {
    pub fn new(t: &'a Tensor) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Ok(Self {
                data: t.data(),
                channels: c,
                height: h,
                width: w,
            }),
            ref s => Err(Error::ShapeMismatch(format!(
                "feature map must be [C, H, W], got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy)]
struct Tap {
    i0: isize,
    frac: f64,
}

impl Tap {
    fn at(coord: f64) -> Self {
        let f = coord.floor();
        Tap {
            i0: f as isize,
            frac: coord - f,
        }
    }
}

#[inline]
fn fetch(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Value and spatial derivatives of one bilinear sample within a channel plane.
#[inline]
fn sample_plane(plane: &[f64], h: usize, w: usize, ty: Tap, tx: Tap) -> (f64, f64, f64) {
    let v00 = fetch(plane, h, w, ty.i0, tx.i0);
    let v01 = fetch(plane, h, w, ty.i0, tx.i0 + 1);
    let v10 = fetch(plane, h, w, ty.i0 + 1, tx.i0);
    let v11 = fetch(plane, h, w, ty.i0 + 1, tx.i0 + 1);
    let (fx, fy) = (tx.frac, ty.frac);
    let top = v00 + fx * (v01 - v00);
    let bottom = v10 + fx * (v11 - v10);
    let value = top + fy * (bottom - top);
    let dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
    let dy = bottom - top;
    (value, dx, dy)
}

/// Bilinear interpolation of every channel at continuous position `(x, y)`.
pub fn bilinear_sample(featmap: &Tensor, x: f64, y: f64) -> Result<Tensor> {
    let v = FeatureView::new(featmap)?;
    let plane = v.height * v.width;
    let (ty, tx) = (Tap::at(y), Tap::at(x));
    let out = (0..v.channels)
        .map(|c| sample_plane(&v.data[c * plane..(c + 1) * plane], v.height, v.width, ty, tx).0)
        .collect();
    Tensor::new(vec![v.channels], out)
}

fn axis_taps(start: f64, extent: f64, bins: usize, samples: usize) -> Vec<Tap> {
    let bin = extent / bins as f64;
    let step = bin / samples as f64;
    (0..bins)
        .flat_map(|b| (0..samples).map(move |s| start + b as f64 * bin + (s as f64 + 0.5) * step))
        .map(Tap::at)
        .collect()
}

fn check_pool_args(out_h: usize, out_w: usize, samples_per_bin: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 || samples_per_bin == 0 {
        return Err(Error::InvalidArgument(format!(
            "pooled size {out_h}x{out_w} and samples per bin {samples_per_bin} must be >= 1"
        )));
    }
    Ok(())
}

fn pool_impl(
    fm: FeatureView<'_>,
    roi: &BBox,
    out_h: usize,
    out_w: usize,
    spb: usize,
    out: &mut [f64],
    mut grads: Option<(&mut [f64], &mut [f64])>,
) {
    let (h, w) = (fm.height, fm.width);
    let plane = h * w;
    let ys = axis_taps(roi.y_min(), roi.height(), out_h, spb);
    let xs = axis_taps(roi.x_min(), roi.width(), out_w, spb);
    let norm = 1.0 / (spb * spb) as f64;
    for c in 0..fm.channels {
        let p = &fm.data[c * plane..(c + 1) * plane];
        for i in 0..out_h {
            for j in 0..out_w {
                let (mut acc, mut gx, mut gy) = (0.0, 0.0, 0.0);
                let mut first = None;
                for ty in &ys[i * spb..(i + 1) * spb] {
                    for tx in &xs[j * spb..(j + 1) * spb] {
                        let (v, dx, dy) = sample_plane(p, h, w, *ty, *tx);
                        // Averaged relative to the first sample; exact on constant maps.
                        let v0 = *first.get_or_insert(v);
                        acc += v - v0;
                        gx += dx;
                        gy += dy;
                    }
                }
                let o = (c * out_h + i) * out_w + j;
                out[o] = first.unwrap_or(0.0) + acc * norm;
                if let Some((ox, oy)) = grads.as_mut() {
                    ox[o] = gx * norm;
                    oy[o] = gy * norm;
                }
            }
        }
    }
}

/// RoIAlign into a caller-provided `[C, out_h, out_w]` buffer. `roi` is in
/// feature-map coordinates.
pub fn roi_align_into(
    fm: FeatureView<'_>,
    roi: &BBox,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), fm.channels * out_h * out_w);
    pool_impl(fm, roi, out_h, out_w, samples_per_bin, out, None);
}

/// RoIAlign of `roi` (feature coordinates) into a `[C, out_h, out_w]` tensor.
/// Each bin averages `samples_per_bin^2` regularly spaced bilinear samples.
pub fn roi_align(
    featmap: &Tensor,
    roi: &BBox,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<Tensor> {
    check_pool_args(out_h, out_w, samples_per_bin)?;
    let fm = FeatureView::new(featmap)?;
    let mut out = vec![0.0; fm.channels * out_h * out_w];
    roi_align_into(fm, roi, out_h, out_w, samples_per_bin, &mut out);
    Tensor::new(vec![fm.channels, out_h, out_w], out)
}

/// Pooled values together with their derivatives with respect to a rigid
/// translation of the RoI along x and y (feature-cell units). Derivatives at
/// integer sample coordinates are one-sided (from the cell at the floor).
pub fn roi_align_translation_grad(
    fm: FeatureView<'_>,
    roi: &BBox,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
    out: &mut [f64],
    d_dx: &mut [f64],
    d_dy: &mut [f64],
) {
    pool_impl(
        fm,
        roi,
        out_h,
        out_w,
        samples_per_bin,
        out,
        Some((d_dx, d_dy)),
    );
}
