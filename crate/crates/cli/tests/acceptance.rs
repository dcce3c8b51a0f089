//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use arcnn::annot::{reasonable_filter, Detection, EvalFrame, Modality};
use arcnn::arcnn::{
    confidence_weights, fuse, rfa_forward, ArcnnDetector, ArcnnModel, ConfidenceWeights, DetectorBank,
    DetectorConfig, FusionMode, MlpHead, ModelConfig, RegionConfig, TrainingRoi, TwoStreamFeatures,
    HEAD_LAYER_NAMES,
};
use arcnn::eval::{mr_score, shift_grid_sweep, shift_grid_sweep_multi, MrValue, ShiftSet, SweepResult, MISS_RATE_FLOOR};
use arcnn::geom::{apply_shift, encode_shift, jitter_box, nms, BBox, ShiftTarget};
use arcnn::synthtrain::{apply_roi_jitter, generate_dataset, train, SceneConfig, SceneFrame, TrainConfig};
use arcnn::tensornet::{roi_align, Tensor};
use arcnn::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use support::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn geometry() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let r = random_box(&mut rng, 640.0);
        let s = random_box(&mut rng, 640.0);
        let back = apply_shift(&r, encode_shift(&r, &s));
        let scale = s.center_x().abs().max(s.center_y().abs()).max(1.0);
        worst = worst
            .max((back.center_x() - s.center_x()).abs() / scale)
            .max((back.center_y() - s.center_y()).abs() / scale);
    }
    let mut mismatches = 0;
    for case in 0..1000 {
        let boxes: Vec<(BBox, f64)> = (0..30)
            .map(|_| (random_box(&mut rng, 100.0), (rng.random_range(0.0..1.0) * 20.0_f64).floor() / 20.0))
            .collect();
        let thr = [0.3, 0.5, 0.7][case % 3];
        mismatches += usize::from(nms(&boxes, thr) != nms_oracle(&boxes, thr));
    }
    let el = t.elapsed();
    outcome(
        worst < 1e-9 && mismatches == 0 && el < Duration::from_secs(10),
        format!("round-trip max rel. error {worst:.1e}, nms mismatches {mismatches}/1000, {}", secs(el)),
    )
}

fn roialign() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let roi_in = |rng: &mut ChaCha8Rng| {
        BBox::new(rng.random_range(1.0..15.0), rng.random_range(1.0..15.0), rng.random_range(2.0..20.0), rng.random_range(2.0..20.0))
            .unwrap()
    };
    let constant = Tensor::filled(vec![2, 40, 40], 0.37);
    let mut constant_ok = true;
    let mut linear_err: f64 = 0.0;
    for _ in 0..500 {
        let roi = roi_in(&mut rng);
        let spb = rng.random_range(1..4);
        constant_ok &= roi_align(&constant, &roi, 7, 7, spb).unwrap().data().iter().all(|&v| v == 0.37);
        let (a, b, c) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let k = rng.random_range(1..8);
        let out = roi_align(&linear_map(40, 40, a, b, c), &roi, k, k, spb).unwrap();
        for (x, y) in out.data().iter().zip(supersampled_bins(&roi, k, 100, a, b, c)) {
            linear_err = linear_err.max((x - y).abs());
        }
    }
    let (h, w) = (40, 40);
    let data: Vec<f64> = (0..h * w)
        .map(|i| ((i % w) as f64 * 0.3).sin() * ((i / w) as f64 * 0.2).cos())
        .collect();
    let mut lip: f64 = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            lip = lip.max((data[y * w + x + 1] - data[y * w + x]).abs() + (data[(y + 1) * w + x] - data[y * w + x]).abs());
        }
    }
    let smooth = Tensor::new(vec![1, h, w], data).unwrap();
    let eps = 1e-3;
    let mut ratio: f64 = 0.0;
    for _ in 0..500 {
        let roi = roi_in(&mut rng);
        let d: [f64; 4] = std::array::from_fn(|_| rng.random_range(-eps..eps));
        let moved = BBox::new(roi.x_min() + d[0], roi.y_min() + d[1], roi.width() + d[2], roi.height() + d[3]).unwrap();
        let a = roi_align(&smooth, &roi, 7, 7, 2).unwrap();
        let b = roi_align(&smooth, &moved, 7, 7, 2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            ratio = ratio.max((x - y).abs() / (2.0 * eps * lip));
        }
    }
    let el = t.elapsed();
    outcome(
        constant_ok && linear_err < 1e-9 && ratio <= 1.0 && el < Duration::from_secs(30),
        format!(
            "constant exact {constant_ok}, linear max error {linear_err:.1e}, perturbation/bound {ratio:.3}, {}",
            secs(el)
        ),
    )
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let groups: [(&str, bool, FusionMode, Vec<&str>); 4] = [
        ("rfa", true, FusionMode::ConfidenceAware, vec!["rfa.fc1", "rfa.fc2"]),
        (
            "confidence",
            true,
            FusionMode::ConfidenceAware,
            vec!["conf_reference.fc1", "conf_reference.fc2", "conf_sensed.fc1", "conf_sensed.fc2"],
        ),
        ("detect", false, FusionMode::NaiveConcat, vec!["detect.fc1", "detect.fc2"]),
        ("composite", true, FusionMode::ConfidenceAware, HEAD_LAYER_NAMES.to_vec()),
    ];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (seed, (name, rfa, fusion, layers)) in groups.iter().enumerate() {
        let (model, features, batch) = grad_fixture(seed as u64 + 2, small_config(*rfa, *fusion));
        assert_eq!(batch.len(), 4);
        let e = check_layers(&model, &features, &batch, layers);
        parts.push(format!("{name} {e:.1e}"));
        worst = worst.max(e);
    }
    let el = t.elapsed();
    outcome(
        worst < 1e-4 && el < Duration::from_secs(120),
        format!("max rel. error {} ({}), {}", format_args!("{worst:.1e}"), parts.join(", "), secs(el)),
    )
}

fn evaluator() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    let mut no_gt = 0;
    for _ in 0..300 {
        let (frames, dets) = eval_fixture(&mut rng);
        if let MrValue::Value(mr) = mr_score(&frames, &dets, Modality::Reference).unwrap().mr {
            worst = worst.max((mr - threshold_oracle_mr(&frames, &dets, Modality::Reference)).abs());
            compared += 1;
        } else if frames.iter().any(|f| oracle_gt(f, Modality::Reference).iter().any(|g| !g.1)) {
            worst = f64::INFINITY;
        } else {
            no_gt += 1;
        }
    }
    let mut bounds_ok = true;
    for _ in 0..50 {
        let (frames, _) = eval_fixture(&mut rng);
        let perfect: Vec<Detection> = frames
            .iter()
            .flat_map(|f| {
                f.annotation.objects.iter().filter_map(|o| {
                    o.reference_box.map(|b| Detection {
                        frame_id: f.annotation.frame_id.clone(),
                        bbox: b,
                        score: 0.9,
                        modality: Modality::Reference,
                    })
                })
            })
            .collect();
        if let MrValue::Value(v) = mr_score(&frames, &perfect, Modality::Reference).unwrap().mr {
            bounds_ok &= v == MISS_RATE_FLOOR;
        }
        if let MrValue::Value(v) = mr_score(&frames, &[], Modality::Reference).unwrap().mr {
            bounds_ok &= v == 1.0;
        }
    }
    let monotone = (0..1000)
        .filter(|_| {
            let (frames, dets) = eval_fixture(&mut rng);
            mr_score(&frames, &dets, Modality::Reference).unwrap().curve.is_monotone()
        })
        .count();
    outcome(
        worst < 1e-12 && bounds_ok && monotone == 1000,
        format!("oracle max diff {worst:.1e} over {compared} fixtures ({no_gt} correctly no-gt), floor/one bounds {bounds_ok}, monotone {monotone}/1000"),
    )
}

fn jitter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let b = BBox::new(100.0, 50.0, 40.0, 90.0).unwrap();
    let n = 100_000;
    let d: Vec<f64> = (0..n).map(|_| jitter_box(&b, 0.05, 0.05, &mut rng).unwrap().center_x() - b.center_x()).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let std = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();

    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let roi = random_box(&mut rng, 300.0);
        let t = ShiftTarget::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
        let dest = apply_shift(&roi, t);
        let batch = [TrainingRoi {
            roi,
            sensed_roi: roi,
            label: 1,
            sensed_label: 1,
            shift_target: Some(t),
            reg_target: None,
        }];
        let j = apply_roi_jitter(&batch, (0.05, 0.05), &mut rng).unwrap()[0];
        let landed = apply_shift(&j.sensed_roi, j.shift_target.unwrap());
        worst = worst
            .max((landed.center_x() - dest.center_x()).abs())
            .max((landed.center_y() - dest.center_y()).abs());
    }
    outcome(
        (std / 2.0 - 1.0).abs() < 0.05 && worst < 1e-12,
        format!("x-displacement std {std:.4} px (target 2.0 +/- 5%), retarget landing error {worst:.1e} px"),
    )
}

/// Synthetic benchmark shared by the trend criteria.
struct Bench {
    test: Vec<SceneFrame>,
    eval: Vec<EvalFrame>,
}

const TRAIN_FRAMES: usize = 200;
const TEST_FRAMES: usize = 100;
const EPOCHS: usize = 8;

fn bench_scene(seed: u64) -> SceneConfig {
    SceneConfig {
        clutter_per_frame: (1, 2),
        day_night_mix: 0.3,
        unpaired_rate: 0.05,
        object_size: (48.0, 72.0),
        seed,
        ..SceneConfig::default()
    }
}

impl Bench {
    fn new() -> Self {
        let test = generate_dataset(&bench_scene(100), TEST_FRAMES, Execution::default()).unwrap();
        let eval: Vec<EvalFrame> = test.iter().map(|f| EvalFrame::unfiltered(f.annotation.clone())).collect();
        let eval = reasonable_filter(&eval, 32.0, false).unwrap();
        Self { test, eval }
    }

    fn train(&self, data: &[SceneFrame], rfa: bool, jitter: bool, fusion: FusionMode) -> ArcnnModel {
        let config = TrainConfig {
            enable_rfa: rfa,
            enable_jitter: jitter,
            fusion,
            epochs: EPOCHS,
            decay_epoch: EPOCHS * 2 / 3,
            learning_rate: 0.002,
            negative_iou_floor: 0.0,
            ..TrainConfig::default()
        };
        let model = ArcnnModel::new(ModelConfig { enable_rfa: rfa, fusion, ..ModelConfig::default() }, 7).unwrap();
        train(model, data, &config, &mut ChaCha8Rng::seed_from_u64(11)).unwrap().0
    }
}

fn shift_degradation(bench: &Bench) -> Outcome {
    let t = Instant::now();
    let aligned = generate_dataset(&bench_scene(200), TRAIN_FRAMES, Execution::default()).unwrap();
    let model = bench.train(&aligned, false, false, FusionMode::NaiveConcat);
    let detector = ArcnnDetector::new(model, DetectorConfig::default());
    let r = shift_grid_sweep(&detector, &bench.test, &bench.eval, &ShiftSet::full(6), Execution::default()).unwrap();
    let el = t.elapsed();
    let mr = |dx, dy| r.get(dx, dy).and_then(MrValue::value).unwrap();
    let corner = [(6, 6), (-6, -6), (6, -6), (-6, 6)].iter().map(|&(x, y)| mr(x, y)).sum::<f64>() / 4.0;
    let origin = mr(0, 0);
    let ratio = corner / origin;
    outcome(
        r.grid.len() == 169 && ratio >= 1.2 && el < Duration::from_secs(900),
        format!(
            "origin MR {origin:.4}, (6,6)-class mean {corner:.4}, ratio {ratio:.2} over {} modes, {}",
            r.grid.len(),
            secs(el)
        ),
    )
}

fn ablation(bench: &Bench) -> Outcome {
    let t = Instant::now();
    let weak = generate_dataset(
        &SceneConfig {
            shift_std: (2.0, 2.0),
            ..bench_scene(300)
        },
        TRAIN_FRAMES,
        Execution::default(),
    )
    .unwrap();
    let models = vec![
        bench.train(&weak, false, false, FusionMode::NaiveConcat),
        bench.train(&weak, true, false, FusionMode::NaiveConcat),
        bench.train(&weak, true, true, FusionMode::NaiveConcat),
        bench.train(&weak, true, true, FusionMode::ConfidenceAware),
    ];
    let bank = DetectorBank::new(models, DetectorConfig::default());
    let results: Vec<SweepResult> =
        shift_grid_sweep_multi(&bank, &bench.test, &bench.eval, &ShiftSet::directions(10), Execution::default()).unwrap();
    let sigma: Vec<[f64; 4]> = results
        .iter()
        .map(|r| r.directions.unwrap().as_array().map(|s| s.sigma))
        .collect();
    let s45_ratio = sigma[3][1] / sigma[0][1];
    let monotone = (0..4).filter(|&d| sigma.windows(2).all(|w| w[1][d] < w[0][d])).count();
    let rows: Vec<String> = ["base", "+RFA", "+RoIJ", "+CAF"]
        .iter()
        .zip(&sigma)
        .map(|(n, s)| format!("{n} {:.4}/{:.4}/{:.4}/{:.4}", s[0], s[1], s[2], s[3]))
        .collect();
    outcome(
        s45_ratio < 0.5 && monotone >= 3,
        format!(
            "sigma S45 full/base {s45_ratio:.3}, monotone directions {monotone}/4; sigma S0/S45/S90/S135: {}; {}",
            rows.join(", "),
            secs(t.elapsed())
        ),
    )
}

fn oracle_alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let reference = smooth_map(&mut rng);
    let sensed = translated(&reference, 1);
    let features = TwoStreamFeatures {
        reference: Tensor::new(vec![C, H, W], reference).unwrap(),
        sensed: Tensor::new(vec![C, H, W], sensed).unwrap(),
        stride: STRIDE,
    };
    let k = 7;
    let config = RegionConfig {
        pooled_size: k,
        samples_per_bin: 2,
        context_factor: 1.5,
        image_bounds: (W as f64 * STRIDE, H as f64 * STRIDE),
    };
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for w in [16.0, 24.0, 32.0] {
        let proposals: Vec<BBox> = (0..50)
            .map(|_| {
                BBox::new(rng.random_range(8.0..(116.0 - w)), rng.random_range(8.0..40.0), w, rng.random_range(20.0..44.0))
                    .unwrap()
            })
            .collect();
        let head = constant_head(2 * C * k * k, 4.0 / w, 0.0, &mut rng);
        for o in rfa_forward(&features, &proposals, &head, &config).unwrap() {
            for (a, r) in o.aligned_sensed.data().iter().zip(o.reference.data()) {
                worst = worst.max((a - r).abs());
            }
            count += 1;
        }
    }
    outcome(worst < 1e-6, format!("max |aligned sensed - reference| {worst:.1e} over {count} interior proposals"))
}

fn fusion_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let dim = 6;
    let branch = |rng: &mut ChaCha8Rng| {
        let mut h = MlpHead::random(dim, 4, 2, 3.0, rng);
        for v in h.fc1.bias.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        h
    };
    let (br, bs) = (branch(&mut rng), branch(&mut rng));
    let (mut in_range, mut unit_disagreement, mut concat_equal) = (0, 0, 0);
    let n = 100_000;
    for i in 0..n {
        let scale = [1e-3, 1.0, 50.0][i % 3];
        let fr = Tensor::from_vec((0..dim).map(|_| rng.random_range(-scale..scale)).collect()).unwrap();
        let fs = Tensor::from_vec((0..dim).map(|_| rng.random_range(-scale..scale)).collect()).unwrap();
        let w = confidence_weights(&fr, &fs, &br, &bs).unwrap();
        in_range += usize::from([w.reference, w.sensed, w.disagreement].iter().all(|v| (0.0..=1.0).contains(v)));
        unit_disagreement += usize::from(confidence_weights(&fr, &fr, &br, &br).unwrap().disagreement == 1.0);
        if i % 100 == 0 {
            let caf = fuse(&fr, &fs, &ConfidenceWeights::UNIT, FusionMode::ConfidenceAware).unwrap();
            let naive = fuse(&fr, &fs, &ConfidenceWeights::UNIT, FusionMode::NaiveConcat).unwrap();
            concat_equal += usize::from(caf == naive);
        }
    }
    outcome(
        in_range == n && unit_disagreement == n && concat_equal == n / 100,
        format!(
            "weights in [0,1] {in_range}/{n}, W_d = 1 on identical inputs {unit_disagreement}/{n}, unit fusion == concat {concat_equal}/{}",
            n / 100
        ),
    )
}

fn arcnn(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_arcnn")).args(args).output().expect("binary runs").status.success()
}

fn reproducibility() -> Outcome {
    let dir = tempfile::TempDir::new().unwrap();
    let d = dir.path();
    let p = |x: &Path| x.to_str().unwrap().to_owned();
    let cfg = d.join("config.json");
    let config = json!({
        "frames": 6,
        "scene": { "image_size": [64, 48], "object_size": [24.0, 36.0], "shift_std": [1.0, 1.0], "seed": 5 },
        "model": { "pooled_size": 3, "rfa_hidden": 8, "confidence_hidden": 6, "detect_hidden": 8 },
        "train": { "epochs": 2, "decay_epoch": 1, "batch_rois": 16 },
        "eval": { "min_height": 10.0 }
    });
    fs::write(&cfg, config.to_string()).unwrap();
    let data = d.join("data");
    if !arcnn(&["generate", "--config", &p(&cfg), "--out", &p(&data)]) {
        return outcome(false, "generate failed".into());
    }
    let mut same = true;
    let mut files = 0;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let train_dir = d.join(format!("train_{run}"));
        let sweep_dir = d.join(format!("sweep_{run}"));
        let ok = arcnn(&["train", "--config", &p(&cfg), "--data", &p(&data), "--seed", "3", "--out", &p(&train_dir)])
            && arcnn(&[
                "sweep", "--config", &p(&cfg), "--data", &p(&data), "--checkpoint", &p(&train_dir.join("checkpoint.json")),
                "--seed", "1", "--out", &p(&sweep_dir),
            ]);
        if !ok {
            return outcome(false, format!("run {run} failed"));
        }
        outputs.push([train_dir.join("checkpoint.json"), train_dir.join("trace.csv"), sweep_dir.join("report.json")]);
    }
    for (a, b) in outputs[0].iter().zip(&outputs[1]) {
        same &= fs::read(a).unwrap() == fs::read(b).unwrap();
        files += 1;
    }
    outcome(same, format!("checkpoint, trace and sweep report byte-identical across two runs: {same} ({files} files)"))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("{} {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    };
    report(1, "geometry oracles", geometry());
    report(2, "RoIAlign correctness", roialign());
    report(3, "gradient checks", gradients());
    report(4, "evaluator oracle", evaluator());
    report(5, "jitter distribution", jitter());
    let bench = Bench::new();
    report(6, "shift degradation trend", shift_degradation(&bench));
    report(7, "ablation trend", ablation(&bench));
    report(8, "oracle alignment", oracle_alignment());
    report(9, "confidence fusion identities", fusion_identities());
    report(10, "reproducibility", reproducibility());
    println!("acceptance: {} of 10 criteria passed in {}", 10 - failed, secs(started.elapsed()));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
