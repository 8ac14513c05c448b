//! Kernel timings. With the `parallel` feature each kernel runs on a
//! one-thread pool and on the full pool; built with
//! `--no-default-features` it runs once on the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use layerlight_nn::{par, Bind, Conv2d, Graph, Init, ParamStore, Shape, Tensor};
use rand::SeedableRng;

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

fn conv(c: &mut Criterion) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv3x3");
    for &(ch, b, hw) in &[(32usize, 8usize, 16usize), (64, 8, 8), (16, 4, 32)] {
        let mut store = ParamStore::new();
        let layer = Conv2d::new(&mut store, "c", ch, ch, 3, 1, Init::He, &mut rng);
        let x = Tensor::full(Shape::new(ch, b, hw, hw), 0.3);
        group.throughput(Throughput::Elements((2 * ch * ch * 9 * b * hw * hw) as u64));
        for (name, pool) in modes() {
            let id = format!("{ch}ch_b{b}_{hw}px");
            group.bench_with_input(BenchmarkId::new(format!("forward/{name}"), &id), &x, |bn, x| {
                pool.install(|| {
                    bn.iter(|| {
                        let mut g = Graph::inference();
                        let xv = g.constant(x.clone());
                        let y = layer.forward(&mut g, &Bind::frozen(&store), xv);
                        g.value(y).len()
                    })
                })
            });
            group.bench_with_input(BenchmarkId::new(format!("forward_backward/{name}"), &id), &x, |bn, x| {
                pool.install(|| {
                    bn.iter(|| {
                        let mut g = Graph::new();
                        let xv = g.input(x.clone());
                        let y = layer.forward(&mut g, &Bind::trainable(&store), xv);
                        g.backward(y);
                        g.param_grads(&store).populated()
                    })
                })
            });
        }
    }
    group.finish();
}

fn elementwise(c: &mut Criterion) {
    let mut group = c.benchmark_group("elementwise");
    let x = Tensor::from_vec(Shape::new(64, 16, 16, 16), (0..64 * 16 * 256).map(|i| (i % 97) as f32 / 50.0 - 1.0).collect());
    group.throughput(Throughput::Elements(x.len() as u64));
    for (name, pool) in modes() {
        group.bench_with_input(BenchmarkId::new("silu_backward", &name), &x, |bn, x| {
            pool.install(|| {
                bn.iter(|| {
                    let mut g = Graph::new();
                    let xv = g.input(x.clone());
                    let y = g.silu(xv);
                    g.backward(y);
                    g.grad(xv).map(|t| t.len())
                })
            })
        });
        group.bench_with_input(BenchmarkId::new("group_norm_backward", &name), &x, |bn, x| {
            pool.install(|| {
                bn.iter(|| {
                    let mut g = Graph::new();
                    let xv = g.input(x.clone());
                    let y = g.group_norm(xv, 8);
                    g.backward(y);
                    g.grad(xv).map(|t| t.len())
                })
            })
        });
    }
    group.finish();
}

criterion_group!(
    name = kernels;
    config = Criterion::default().sample_size(20).configure_from_args();
    targets = conv, elementwise
);
criterion_main!(kernels);
