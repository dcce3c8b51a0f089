//! Finite-difference checks of every trainable path of the detector loss.

mod support;

use arcnn::arcnn::{FusionMode, GradientFlow, HEAD_LAYER_NAMES};
use arcnn::tensornet::{grad_check, Tensor};
use support::{check_layers, grad_fixture as fixture, small_config, BOUNDS, EPS};

#[test]
fn analytic_loss_matches_forward_loss() {
    let (model, features, batch) = fixture(1, small_config(true, FusionMode::ConfidenceAware));
    let (a, _) = model.loss_and_grad(&features, BOUNDS, &batch, 1.0).unwrap();
    let b = model.batch_loss(&features, BOUNDS, &batch).unwrap();
    for (x, y) in [(a.cls, b.cls), (a.confidence, b.confidence), (a.shift, b.shift), (a.reg, b.reg)] {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
    assert!(a.shift > 0.0 && a.reg > 0.0 && a.confidence > 0.0);
}

#[test]
fn rfa_head_gradient() {
    let (model, features, batch) = fixture(2, small_config(true, FusionMode::ConfidenceAware));
    let e = check_layers(&model, &features, &batch, &["rfa.fc1", "rfa.fc2"]);
    assert!(e < 1e-4, "rfa head rel. error {e}");
}

#[test]
fn confidence_branch_gradients() {
    let (model, features, batch) = fixture(3, small_config(true, FusionMode::ConfidenceAware));
    let e = check_layers(
        &model,
        &features,
        &batch,
        &["conf_reference.fc1", "conf_reference.fc2", "conf_sensed.fc1", "conf_sensed.fc2"],
    );
    assert!(e < 1e-4, "confidence branches rel. error {e}");
}

#[test]
fn detect_head_gradient() {
    let (model, features, batch) = fixture(4, small_config(false, FusionMode::NaiveConcat));
    let e = check_layers(&model, &features, &batch, &["detect.fc1", "detect.fc2"]);
    assert!(e < 1e-4, "detect head rel. error {e}");
}

#[test]
fn full_composite_gradient_every_variant() {
    for (seed, rfa, fusion) in [
        (5, true, FusionMode::ConfidenceAware),
        (6, true, FusionMode::NaiveConcat),
        (7, false, FusionMode::ConfidenceAware),
    ] {
        let (model, features, batch) = fixture(seed, small_config(rfa, fusion));
        let layers: Vec<&str> = HEAD_LAYER_NAMES
            .iter()
            .copied()
            .filter(|l| (rfa || !l.starts_with("rfa")) && (fusion == FusionMode::ConfidenceAware || !l.starts_with("conf")))
            .collect();
        let e = check_layers(&model, &features, &batch, &layers);
        assert!(e < 1e-4, "variant rfa={rfa} {fusion:?}: rel. error {e}");
    }
}

#[test]
fn detached_sampling_trains_rfa_on_shift_loss_only() {
    let (model, features, batch) = fixture(8, small_config(true, FusionMode::ConfidenceAware));
    let lambda = 0.7;
    let (_, full) = model.loss_and_grad(&features, BOUNDS, &batch, lambda).unwrap();
    let (_, det) = model
        .loss_and_grad_with(&features, BOUNDS, &batch, lambda, GradientFlow::DetachSampling)
        .unwrap();
    let mut worst: f64 = 0.0;
    for layer in ["rfa.fc1", "rfa.fc2"] {
        for part in ["weight", "bias"] {
            let name = format!("{layer}.{part}");
            let at = model.heads.tensor(&name).unwrap().clone();
            let f = |t: &Tensor| {
                let mut m = model.clone();
                *m.heads.tensor_mut(&name).unwrap() = t.clone();
                m.batch_loss(&features, BOUNDS, &batch).map(|l| lambda * l.shift)
            };
            worst = worst.max(grad_check(f, &at, det.tensor(&name).unwrap(), EPS).unwrap());
        }
    }
    assert!(worst < 1e-4, "detached rfa rel. error {worst}");
    for layer in HEAD_LAYER_NAMES.iter().filter(|l| !l.starts_with("rfa")) {
        let name = format!("{layer}.weight");
        let (a, b) = (full.tensor(&name).unwrap(), det.tensor(&name).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{name}: {x} vs {y}");
        }
    }
}
