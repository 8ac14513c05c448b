//! Pipeline-level timings on one-thread and full rayon pools, or on the
//! sequential fallback when built with `--no-default-features`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use layerlight_core::diffusion::{Adapter, AdapterConfig, ConditionSpec, Denoiser, DenoiserConfig, DiffusionSchedule, NoisePredictor, Scorer};
use layerlight_core::distill::{DistillConfig, RelightDistiller};
use layerlight_core::scene::{render_relit, sample_scene, LightSpec, NUM_DIRECTIONS};
use layerlight_nn::{par, Shape, Tensor};

fn modes() -> Vec<(String, rayon::ThreadPool)> {
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    if par::is_parallel() {
        let n = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        let mut v = vec![("rayon-1".to_string(), pool(1))];
        if n > 1 {
            v.push((format!("rayon-{n}"), pool(n)));
        }
        v
    } else {
        vec![("sequential".to_string(), pool(1))]
    }
}

fn scorer_forward(c: &mut Criterion) {
    let d = Denoiser::new(DenoiserConfig::default(), 0);
    let a = Adapter::for_denoiser(AdapterConfig::default(), &d, 1);
    let s = Scorer::new(&d, Some(&a));
    let x = Tensor::full(Shape::new(3, 8, 32, 32), 0.4);
    let t = vec![500; 8];
    let cond = vec![ConditionSpec::new(3, 2); 8];
    let mut group = c.benchmark_group("scorer");
    for (name, pool) in modes() {
        group.bench_function(BenchmarkId::new("predict_b8_32px", &name), |b| {
            pool.install(|| b.iter(|| s.predict_noise(&x, &t, &cond, Some(&x)).len()))
        });
    }
    group.finish();
}

fn distill_step(c: &mut Criterion) {
    let d = Denoiser::new(DenoiserConfig::default(), 0);
    let a = Adapter::for_denoiser(AdapterConfig::default(), &d, 1);
    let s = Scorer::new(&d, Some(&a));
    let sched = DiffusionSchedule::cosine(1000).unwrap();
    let scene = sample_scene(3, 32, 4).unwrap();
    let base = layerlight_core::scene::render_uniform(&scene, 0.9).unwrap();
    let cfg = DistillConfig::default();
    let mut group = c.benchmark_group("distill");
    group.sample_size(10);
    for (name, pool) in modes() {
        group.bench_function(BenchmarkId::new("relight_step", &name), |b| {
            pool.install(|| {
                let mut dist = RelightDistiller::new(&s, &sched, &base, ConditionSpec::new(3, 4), &cfg).unwrap();
                b.iter(|| dist.step().unwrap().row.total_grad_norm)
            })
        });
        // Independent short runs, the unit of parallel work in evaluation.
        group.bench_function(BenchmarkId::new("four_runs_x5_steps", &name), |b| {
            pool.install(|| {
                b.iter(|| {
                    par::map_indexed(4, |k| {
                        let cfg = DistillConfig { iters: 5, seed: k as u64, ..cfg.clone() };
                        let mut dist = RelightDistiller::new(&s, &sched, &base, ConditionSpec::new(k * 3, 4), &cfg).unwrap();
                        (0..cfg.iters).map(|_| dist.step().unwrap().row.total_grad_norm).sum::<f64>()
                    })
                })
            })
        });
    }
    group.finish();
}

fn render(c: &mut Criterion) {
    let scene = sample_scene(9, 64, 6).unwrap();
    let mut group = c.benchmark_group("scene");
    for (name, pool) in modes() {
        group.bench_function(BenchmarkId::new("render_12_directions_64px", &name), |b| {
            pool.install(|| {
                b.iter(|| par::map_indexed(NUM_DIRECTIONS, |d| render_relit(&scene, &LightSpec::new(d)).unwrap().data()[0]))
            })
        });
    }
    group.finish();
}

criterion_group!(
    name = pipeline;
    config = Criterion::default().sample_size(20).configure_from_args();
    targets = scorer_forward, distill_step, render
);
criterion_main!(pipeline);
