//! Reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use layerlight_core::dataset::{generate_dataset, DatasetConfig, Manifest, Split};
use layerlight_core::diffusion::{ConditionSpec, NoisePredictor, TrainingSet};
use layerlight_nn::{Graph, Shape, Tensor, Var};
use std::path::Path;

/// Toy generator used by the gradient oracle: one 3x3 convolution from the
/// base image to two logit planes, sigmoid, clip to [0.1, 1], then
/// `base * shade / light` clamped to [0, 1]. Parameters: 2*27 weights then
/// 2 biases, 56 in total.
pub mod toy {
    pub const SIZE: usize = 4;
    pub const NUM_PARAMS: usize = 2 * 27 + 2;

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// `base` is channel-major `[3][SIZE][SIZE]`. Returns the layers
    /// `[2][SIZE][SIZE]` (shade, light).
    pub fn layers(theta: &[f64], base: &[f64]) -> Vec<f64> {
        assert_eq!(theta.len(), NUM_PARAMS);
        let n = SIZE * SIZE;
        let mut out = vec![0.0; 2 * n];
        for co in 0..2 {
            for oy in 0..SIZE {
                for ox in 0..SIZE {
                    let mut acc = theta[54 + co];
                    for ci in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= SIZE as isize || ix >= SIZE as isize {
                                    continue;
                                }
                                let w = theta[co * 27 + ci * 9 + ky * 3 + kx];
                                acc += w * base[ci * n + iy as usize * SIZE + ix as usize];
                            }
                        }
                    }
                    out[co * n + oy * SIZE + ox] = sigmoid(acc).clamp(0.1, 1.0);
                }
            }
        }
        out
    }

    pub fn edited(theta: &[f64], base: &[f64]) -> Vec<f64> {
        let n = SIZE * SIZE;
        let l = layers(theta, base);
        (0..3 * n).map(|i| (base[i] * l[i % n] / l[n + i % n]).clamp(0.0, 1.0)).collect()
    }

    /// `<g, edited(theta)>` with `g` held fixed.
    pub fn surrogate(theta: &[f64], base: &[f64], g: &[f64]) -> f64 {
        edited(theta, base).iter().zip(g).map(|(a, b)| a * b).sum()
    }

    /// Central finite differences of the surrogate.
    pub fn fd_grad(theta: &[f64], base: &[f64], g: &[f64], h: f64) -> Vec<f64> {
        (0..theta.len())
            .map(|i| {
                let mut p = theta.to_vec();
                let mut m = theta.to_vec();
                p[i] += h;
                m[i] -= h;
                (surrogate(&p, base, g) - surrogate(&m, base, g)) / (2.0 * h)
            })
            .collect()
    }
}

/// Build the toy generator in the autodiff graph. Returns (weight, bias,
/// edited) variables.
pub fn toy_graph(g: &mut Graph, theta: &[f64], base: &Tensor) -> (Var, Var, Var) {
    let w = g.input(Tensor::from_vec(Shape::new(2, 1, 1, 27), theta[..54].iter().map(|&v| v as f32).collect()));
    let b = g.input(Tensor::from_vec(Shape::new(2, 1, 1, 1), theta[54..].iter().map(|&v| v as f32).collect()));
    let x = g.constant(base.clone());
    let logits = g.conv2d(x, w, Some(b), 3, 1);
    let s = g.slice_channels(logits, 0, 1);
    let l = g.slice_channels(logits, 1, 1);
    let s = g.sigmoid(s);
    let l = g.sigmoid(l);
    let s = g.clamp_inward(s, 0.1, 1.0);
    let l = g.clamp_inward(l, 0.1, 1.0);
    let e = g.relight(base, s, l);
    (w, b, e)
}

/// Fixed linear scorer `eps_hat = A x_t`, with `A` a dense matrix over the
/// flattened image, applied per batch element.
pub struct LinearScorer {
    pub a: Vec<f64>,
    pub n: usize,
}

impl LinearScorer {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut state = seed;
        let a = (0..n * n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.2
            })
            .collect();
        Self { a, n }
    }
}

impl NoisePredictor for LinearScorer {
    fn predict_noise(&self, x_t: &Tensor, _t: &[usize], _c: &[ConditionSpec], _ci: Option<&Tensor>) -> Tensor {
        let s = x_t.shape();
        let per = s.c * s.h * s.w;
        assert_eq!(per, self.n);
        let mut out = x_t.clone();
        for b in 0..s.b {
            let v: Vec<f64> = (0..s.c).flat_map(|c| x_t.plane(c, b).iter().map(|&x| f64::from(x)).collect::<Vec<_>>()).collect();
            for c in 0..s.c {
                let dst = out.plane_mut(c, b);
                for (p, d) in dst.iter_mut().enumerate() {
                    let row = (c * s.h * s.w + p) * self.n;
                    *d = self.a[row..row + self.n].iter().zip(&v).map(|(a, x)| a * x).sum::<f64>() as f32;
                }
            }
        }
        out
    }
}

/// Returns the noise it was constructed with, whatever the input.
pub struct EchoScorer(pub Tensor);

impl NoisePredictor for EchoScorer {
    fn predict_noise(&self, _x: &Tensor, _t: &[usize], _c: &[ConditionSpec], _ci: Option<&Tensor>) -> Tensor {
        self.0.clone()
    }
}

/// Small dataset for contract tests: 13 scenes at 32x32.
pub fn tiny_dataset(dir: &Path, seed: u64) -> Manifest {
    let cfg = DatasetConfig { num_scenes: 13, size: 32, seed, ..DatasetConfig::default() };
    generate_dataset(&cfg, dir, true).unwrap()
}

pub fn tiny_training_set(dir: &Path, seed: u64) -> (Manifest, TrainingSet) {
    let m = tiny_dataset(dir, seed);
    let train = m.load_split(Split::Train).unwrap();
    let set = TrainingSet::from_samples(&train).unwrap();
    (m, set)
}

pub struct SdsOracle {
    /// `|analytic - fd| / |fd|` over all 56 parameters.
    pub rel_err: f64,
    pub fd_norm: f64,
    /// Largest parameter gradient when the scorer returns the drawn noise.
    pub perfect_max_abs: f32,
}

/// Inject `w(t)(eps_hat - eps)` from a fixed linear scorer into the toy
/// generator and compare the parameter gradient with central differences
/// of `<g, edited(theta)>` computed by the f64 reference above.
pub fn sds_oracle(seed: u64) -> SdsOracle {
    use layerlight_core::diffusion::{train::noised, DiffusionSchedule};
    use layerlight_core::distill::sds::{batch_mean, randn, sample_timesteps, sds_grad};
    use rand::Rng;

    let n = toy::SIZE * toy::SIZE;
    let mut rng = layerlight_core::seed::rng(seed);
    // Small base values and parameters keep every composed pixel strictly
    // inside (0, 1) and every layer inside (0.1, 1), away from the kinks.
    let base_v: Vec<f64> = (0..3 * n).map(|_| rng.random_range(0.02..0.2)).collect();
    let theta: Vec<f64> = (0..toy::NUM_PARAMS).map(|_| rng.random_range(-0.1..0.1)).collect();
    let base = Tensor::from_vec(Shape::new(3, 1, toy::SIZE, toy::SIZE), base_v.iter().map(|&v| v as f32).collect());
    let schedule = DiffusionSchedule::cosine(1000).unwrap();

    let run = |scorer: &dyn NoisePredictor, rng: &mut layerlight_core::seed::Rng| {
        let mut g = Graph::new();
        let (w, b, e) = toy_graph(&mut g, &theta, &base);
        let batch = 3;
        let x = g.value(e).repeat_batch(batch);
        let t = sample_timesteps(&schedule, (0.02, 0.98), batch, rng);
        let eps = randn(x.shape(), rng);
        let x_t = noised(&x, &eps, &t, &schedule);
        let est = scorer.predict_noise(&x_t, &t, &vec![ConditionSpec::null(); batch], None);
        let up = batch_mean(&sds_grad(&x, &t, &eps, &est, &schedule).unwrap());
        g.backward_with(vec![(e, up.clone())]);
        let grad: Vec<f32> = g.grad(w).unwrap().data().iter().chain(g.grad(b).unwrap().data()).copied().collect();
        (grad, up, eps)
    };

    let lin = LinearScorer::new(3 * n, seed ^ 0x5EED);
    let (analytic, up, _) = run(&lin, &mut rng.clone());
    let gv: Vec<f64> = up.data().iter().map(|&v| f64::from(v)).collect();
    let fd = toy::fd_grad(&theta, &base_v, &gv, 1e-6);
    let diff: f64 = analytic.iter().zip(&fd).map(|(a, f)| (f64::from(*a) - f).powi(2)).sum::<f64>().sqrt();
    let fd_norm = fd.iter().map(|f| f * f).sum::<f64>().sqrt();

    // Same draws again, but the scorer echoes the noise it will be compared with.
    let mut probe = rng.clone();
    let (_, _, eps) = run(&lin, &mut probe);
    let (perfect, _, _) = run(&EchoScorer(eps), &mut rng.clone());
    let perfect_max_abs = perfect.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    SdsOracle { rel_err: diff / fd_norm, fd_norm, perfect_max_abs }
}

pub struct CompositionCheck {
    /// Largest cross-channel ratio spread on pixels where no channel clamps.
    pub max_ratio_spread: f64,
    pub unclamped_pixels: usize,
    pub identity_bitwise: bool,
}

/// `triples` random (base, shade, light) triples of 4x4 images.
pub fn composition_check(triples: usize, seed: u64) -> CompositionCheck {
    use layerlight_core::compose::compose_relight;
    use layerlight_core::image::{LinearImage, LuminosityLayer};
    use rand::Rng;

    let mut rng = layerlight_core::seed::rng(seed);
    let (w, h) = (4, 4);
    let mut out = CompositionCheck { max_ratio_spread: 0.0, unclamped_pixels: 0, identity_bitwise: true };
    for _ in 0..triples {
        let base = LinearImage::new(w, h, (0..3 * w * h).map(|_| rng.random_range(1e-3..=1.0)).collect()).unwrap();
        let shade = LuminosityLayer::new(w, h, (0..w * h).map(|_| rng.random_range(0.1..=1.0)).collect()).unwrap();
        let light = LuminosityLayer::new(w, h, (0..w * h).map(|_| rng.random_range(0.1..=1.0)).collect()).unwrap();
        let e = compose_relight(&base, &shade, &light).unwrap();
        for (b, p) in base.pixels().zip(e.pixels()) {
            if p.iter().any(|&v| v <= 0.0 || v >= 1.0) {
                continue;
            }
            out.unclamped_pixels += 1;
            let r = [p[0] / b[0], p[1] / b[1], p[2] / b[2]];
            let hi = r.iter().cloned().fold(f64::MIN, f64::max);
            let lo = r.iter().cloned().fold(f64::MAX, f64::min);
            out.max_ratio_spread = out.max_ratio_spread.max(hi - lo);
        }
        let one = LuminosityLayer::filled(w, h, 1.0).unwrap();
        let id = compose_relight(&base, &one, &one).unwrap();
        out.identity_bitwise &= id.data().iter().zip(base.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    out
}

/// For `scenes` random scenes, how many of the twelve ground-truth renders
/// the oracle assigns to their own index at rank 1, out of how many.
pub fn oracle_self_consistency(scenes: usize, seed: u64) -> (usize, usize) {
    use layerlight_core::eval::direction_oracle;
    use layerlight_core::scene::{render_relit, sample_scene, LightSpec, NUM_CATEGORIES, NUM_DIRECTIONS};
    use rand::Rng;

    let mut rng = layerlight_core::seed::rng(seed);
    let mut hits = 0;
    for _ in 0..scenes {
        let scene = sample_scene(rng.random(), 32, rng.random_range(0..NUM_CATEGORIES)).unwrap();
        for d in 0..NUM_DIRECTIONS {
            let gt = render_relit(&scene, &LightSpec::new(d)).unwrap();
            let r = direction_oracle(&gt, &scene, d).unwrap();
            hits += usize::from(r.best_index == d && r.rank == 1);
        }
    }
    (hits, scenes * NUM_DIRECTIONS)
}

/// Every file under `dir`, relative path to contents, sorted.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

pub fn tiny_denoiser_config() -> layerlight_core::diffusion::DenoiserConfig {
    layerlight_core::diffusion::DenoiserConfig { widths: [8, 16, 16], emb_dim: 16, time_features: 8 }
}

pub fn tiny_adapter_config() -> layerlight_core::diffusion::AdapterConfig {
    layerlight_core::diffusion::AdapterConfig { widths: [8, 8, 16], emb_dim: 16, time_features: 8 }
}

/// A briefly trained tiny denoiser.
pub fn tiny_denoiser(set: &TrainingSet, seed: u64) -> layerlight_core::diffusion::Denoiser {
    use layerlight_core::diffusion::{train_denoiser, Denoiser, DenoiserTrainConfig, DiffusionSchedule};
    let schedule = DiffusionSchedule::cosine(1000).unwrap();
    let mut d = Denoiser::new(tiny_denoiser_config(), seed);
    let cfg = DenoiserTrainConfig { epochs: 1, batch: 16, seed, ..DenoiserTrainConfig::default() };
    train_denoiser(&mut d, set, &schedule, &cfg).unwrap();
    d
}

pub struct ScheduleCheck {
    pub max_identity_dev: f64,
    /// `sigma_0` and `max |add_noise(x, 0, eps) - x|`.
    pub start: (f64, f64),
    /// `alpha_{T-1}` and `max |add_noise(x, T-1, eps) - eps|`.
    pub end: (f64, f64),
    /// Both deviations within their affine bounds.
    pub bounds_hold: bool,
    pub errors_on_out_of_range: bool,
}

pub fn schedule_check(num_steps: usize) -> ScheduleCheck {
    use layerlight_core::diffusion::{add_noise, DiffusionSchedule};
    use layerlight_core::image::LinearImage;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    let s = DiffusionSchedule::cosine(num_steps).unwrap();
    let max_identity_dev = (0..num_steps).map(|t| (s.alpha[t].powi(2) + s.sigma[t].powi(2) - 1.0).abs()).fold(0.0, f64::max);
    let mut rng = layerlight_core::seed::rng(3);
    let x = LinearImage::new(8, 8, (0..192).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap();
    let eps: Vec<f64> = (0..192).map(|_| StandardNormal.sample(&mut rng)).collect();
    let emax = eps.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let max_dev = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let last = num_steps - 1;
    let d0 = max_dev(&add_noise(&s, &x, 0, &eps).unwrap(), x.data());
    let d1 = max_dev(&add_noise(&s, &x, last, &eps).unwrap(), &eps);
    let bounds_hold = d0 <= (1.0 - s.alpha[0]) + s.sigma[0] * emax + 1e-12
        && d1 <= s.alpha[last] + (1.0 - s.sigma[last]) * emax + 1e-12;
    ScheduleCheck {
        max_identity_dev,
        start: (s.sigma[0], d0),
        end: (s.alpha[last], d1),
        bounds_hold,
        errors_on_out_of_range: add_noise(&s, &x, num_steps, &eps).is_err(),
    }
}
