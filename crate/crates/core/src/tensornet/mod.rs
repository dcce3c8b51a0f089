//! Dense float64 tensors and the handful of layers the detector needs.

mod fc;
mod gradcheck;
mod ops;
mod pool;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fc::{fc_forward, FcLayer};
pub use gradcheck::{grad_check, numerical_gradient};
pub use ops::{cross_entropy2, relu, smooth_l1, smooth_l1_grad, softmax2};
pub use pool::{
    bilinear_sample, roi_align, roi_align_into, roi_align_translation_grad, FeatureView,
    DEFAULT_POOLED_SIZE, DEFAULT_SAMPLES_PER_BIN,
};

pub(crate) use fc::gemm;

/// Row-major n-dimensional array of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;
    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            shape: t.shape,
            data: t.data,
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for in-place updates. Callers keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{what}[{i}]"))),
            None => Ok(()),
        }
    }

    /// Element of a `[C, H, W]` tensor.
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    /// Concatenate along the first axis. Trailing dimensions must agree.
    pub fn concat(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("nothing to concatenate".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(Error::ShapeMismatch(format!(
                    "cannot concatenate {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Ok(Self { shape, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }
}
