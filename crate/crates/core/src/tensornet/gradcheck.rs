use super::Tensor;
use crate::error::{Error, Result};

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Central finite-difference gradient of `f` at `at`.
pub fn numerical_gradient<F>(f: F, at: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let mut probe = at.clone();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let g = (up - down) / (2.0 * eps);
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        grad.push(g);
    }
    Tensor::new(at.shape().to_vec(), grad)
}

/// Max over coordinates of `|numeric - analytic| / max(|numeric|, |analytic|, floor)`.
pub fn grad_check<F>(f: F, at: &Tensor, analytic_grad: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if analytic_grad.shape() != at.shape() {
        return Err(Error::ShapeMismatch(format!(
            "analytic gradient {:?} vs point {:?}",
            analytic_grad.shape(),
            at.shape()
        )));
    }
    analytic_grad.ensure_finite("analytic gradient")?;
    let numeric = numerical_gradient(f, at, eps)?;
    Ok(numeric
        .data()
        .iter()
        .zip(analytic_grad.data())
        .map(|(n, a)| (n - a).abs() / n.abs().max(a.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max))
}
