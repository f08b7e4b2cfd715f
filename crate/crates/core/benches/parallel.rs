//! Parallel versus sequential execution of the data-parallel hot spots.
//! Both paths produce identical results; only wall time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tide_core::eval::consistency_report;
use tide_core::experiment::procedural_dataset;
use tide_core::model::{ModelConfig, TideModel, Toggles};
use tide_core::par;
use tide_core::sample::sample_triple;
use tide_core::scenes::{generate_many, DepthRule, Grammar};
use tide_core::schedule::NoiseSchedule;
use tide_core::seed;
use tide_core::train::{encode_dataset, optimize_step, AdamW, EncodedSample};

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn small_model() -> TideModel {
    let cfg = ModelConfig { image_layers: 4, mini_layers: 2, share_end: 3, width: 32, ..ModelConfig::default() };
    let mut m = TideModel::new(cfg, &mut seed::stream(0, &[])).unwrap();
    m.freeze_for_finetune();
    m
}

fn per_sample_gradients(c: &mut Criterion) {
    let data: Vec<EncodedSample> = encode_dataset(&procedural_dataset(8, 16).unwrap()).unwrap();
    let batch: Vec<&EncodedSample> = data.iter().collect();
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    let mut group = c.benchmark_group("per_sample_gradients");
    group.sample_size(10);
    for (name, seq) in MODES {
        let mut model = small_model();
        let mut opt = AdamW::new(1e-3, 0.0);
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::new(name, batch.len()), |b| {
            let mut step = 0;
            b.iter(|| {
                step += 1;
                optimize_step(&mut model, &mut opt, &batch, &schedule, Toggles::BOTH, 0, step).unwrap()
            })
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn sampling_jobs(c: &mut Criterion) {
    let model = small_model();
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    let jobs: Vec<u64> = (0..8).collect();
    let mut group = c.benchmark_group("sampling_jobs");
    group.sample_size(10);
    for (name, seq) in MODES {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::new(name, jobs.len()), |b| {
            b.iter(|| {
                par::map(&jobs, |&s| sample_triple(&model, &schedule, "two fish over a rocky seabed", 10, s, Toggles::BOTH).unwrap())
            })
        });
    }
    par::set_sequential(false);
    group.finish();
}

fn scene_generation(c: &mut Criterion) {
    let seeds: Vec<u64> = (0..256).collect();
    let grammar = Grammar::with_size(32);
    let mut group = c.benchmark_group("scene_generation");
    for (name, seq) in MODES {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::new(name, seeds.len()), |b| b.iter(|| generate_many(&seeds, &grammar).unwrap()));
    }
    par::set_sequential(false);
    group.finish();
}

fn metric_sweep(c: &mut Criterion) {
    let grammar = Grammar::with_size(32);
    let rule = DepthRule::for_grammar(&grammar);
    let scenes = generate_many(&(0..256).collect::<Vec<_>>(), &grammar).unwrap();
    let mut group = c.benchmark_group("metric_sweep");
    for (name, seq) in MODES {
        par::set_sequential(seq);
        group.bench_function(BenchmarkId::new(name, scenes.len()), |b| {
            b.iter(|| {
                par::map(&scenes, |q| consistency_report(q.image.view(), q.depth.view(), q.mask.view(), &rule).unwrap())
            })
        });
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, per_sample_gradients, sampling_jobs, scene_generation, metric_sweep);
criterion_main!(benches);
