use super::Tensor;

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

/// Two-class softmax over `(z0, z1)`, returned as `(p0, p1)`.
pub fn softmax2(z0: f64, z1: f64) -> (f64, f64) {
    let m = z0.max(z1);
    let e0 = (z0 - m).exp();
    let e1 = (z1 - m).exp();
    let s = e0 + e1;
    (e0 / s, e1 / s)
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Cross-entropy of two-class logits against `label` (0 or 1), plus its
/// gradient with respect to `(z0, z1)`.
pub fn cross_entropy2(z0: f64, z1: f64, label: usize) -> (f64, [f64; 2]) {
    let m = z0.max(z1);
    let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
    let (p0, p1) = softmax2(z0, z1);
    let z = if label == 1 { z1 } else { z0 };
    let g = if label == 1 {
        [p0, p1 - 1.0]
    } else {
        [p0 - 1.0, p1]
    };
    (lse - z, g)
}
