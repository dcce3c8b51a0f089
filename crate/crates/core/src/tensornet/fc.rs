use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Fully connected layer `y = W x + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl FcLayer {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let (out, _) = match weights.shape() {
            [o, i] => (*o, *i),
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "fc weights must be 2-d, got {s:?}"
                )))
            }
        };
        if bias.shape() != [out] {
            return Err(Error::ShapeMismatch(format!(
                "fc bias {:?} does not match {out} outputs",
                bias.shape()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Tensor::zeros(vec![out_dim, in_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    /// Gaussian weights with std `sqrt(gain / in_dim)`, zero bias.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, gain: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (gain / in_dim as f64).sqrt()).expect("finite std");
        let data = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
        Self {
            weights: Tensor::new(vec![out_dim, in_dim], data).expect("consistent shape"),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Forward pass on `n` rows of `in_dim` values; returns `n * out_dim` values.
    pub fn forward_rows(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (i, o) = (self.in_dim(), self.out_dim());
        debug_assert_eq!(x.len(), n * i);
        let mut y = Vec::with_capacity(n * o);
        for _ in 0..n {
            y.extend_from_slice(self.bias.data());
        }
        // Y[n,o] += X[n,i] * W^T[i,o]
        gemm(n, i, o, x, (i, 1), self.weights.data(), (1, i), &mut y, (o, 1), 1.0);
        y
    }

    /// Accumulate parameter gradients into `grad` and optionally return the
    /// gradient with respect to the input rows.
    pub fn backward_rows(
        &self,
        x: &[f64],
        dy: &[f64],
        n: usize,
        grad: &mut FcLayer,
        need_dx: bool,
    ) -> Option<Vec<f64>> {
        let (i, o) = (self.in_dim(), self.out_dim());
        debug_assert_eq!(dy.len(), n * o);
        // dW[o,i] += dY^T[o,n] * X[n,i]
        gemm(o, n, i, dy, (1, o), x, (i, 1), grad.weights.data_mut(), (i, 1), 1.0);
        let db = grad.bias.data_mut();
        for row in dy.chunks_exact(o) {
            for (g, v) in db.iter_mut().zip(row) {
                *g += v;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![0.0; n * i];
            // dX[n,i] = dY[n,o] * W[o,i]
            gemm(n, o, i, dy, (o, 1), self.weights.data(), (i, 1), &mut dx, (i, 1), 0.0);
            dx
        })
    }
}

/// `y = W x + b` for an input of shape `[in]` or `[n, in]`.
pub fn fc_forward(layer: &FcLayer, input: &Tensor) -> Result<Tensor> {
    let (n, shape_out) = match input.shape() {
        [i] if *i == layer.in_dim() => (1, vec![layer.out_dim()]),
        [n, i] if *i == layer.in_dim() => (*n, vec![*n, layer.out_dim()]),
        s => {
            return Err(Error::ShapeMismatch(format!(
                "fc layer expects inner dimension {}, got input {s:?}",
                layer.in_dim()
            )))
        }
    };
    Tensor::new(shape_out, layer.forward_rows(input.data(), n))
}

/// `C[m,n] = A[m,k] * B[k,n] + beta * C` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    c_strides: (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, a_strides) < a.len(), "gemm: A out of bounds");
        assert!(last(k, n, b_strides) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(m, n, c_strides) < c.len(), "gemm: C out of bounds");
    // SAFETY: every element addressed through the strides lies inside the
    // slices (checked above), and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}
