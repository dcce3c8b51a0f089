use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use arcnn::annot::EvalFrame;
use arcnn::arcnn::{ArcnnDetector, ArcnnModel, DetectorConfig, ModelConfig};
use arcnn::eval::{shift_grid_sweep, ShiftSet};
use arcnn::synthtrain::{generate_dataset, SceneConfig};
use arcnn::Execution;

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn scene() -> SceneConfig {
    SceneConfig {
        image_size: (96, 80),
        object_size: (28.0, 40.0),
        shift_std: (2.0, 2.0),
        seed: 1,
        ..SceneConfig::default()
    }
}

fn generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate_dataset");
    for exec in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| generate_dataset(black_box(&scene()), 32, exec).unwrap())
        });
    }
    g.finish();
}

fn sweep(c: &mut Criterion) {
    let frames = generate_dataset(&scene(), 8, Execution::Sequential).unwrap();
    let eval: Vec<EvalFrame> = frames.iter().map(|f| EvalFrame::unfiltered(f.annotation.clone())).collect();
    let config = ModelConfig {
        pooled_size: 5,
        rfa_hidden: 64,
        confidence_hidden: 16,
        detect_hidden: 32,
        ..ModelConfig::default()
    };
    let detector = ArcnnDetector::new(ArcnnModel::new(config, 2).unwrap(), DetectorConfig::default());
    let modes = ShiftSet::custom((-4..=4).map(|d| (d, d)).collect()).unwrap();
    let mut g = c.benchmark_group("shift_grid_sweep");
    g.sample_size(10);
    for exec in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| shift_grid_sweep(&detector, &frames, &eval, &modes, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, generation, sweep);
criterion_main!(benches);
