//! Denoising score-matching training for the denoiser and the adapter.

use layerlight_nn::{AdamW, AdamWConfig, Graph, Shape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::convert::image_to_tensor;
use super::model::{Adapter, ConditionSpec, Denoiser, Scorer};
use super::schedule::DiffusionSchedule;
use crate::dataset::DatasetSample;
use crate::error::{Error, Result};
use crate::seed;

/// In-memory training tensors: one uniform-lit and twelve relit images per scene.
pub struct TrainingSet {
    pub uniform: Vec<Tensor>,
    pub relit: Vec<Vec<Tensor>>,
    pub category: Vec<usize>,
    pub shape: Shape,
}

impl TrainingSet {
    pub fn from_samples(samples: &[DatasetSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Dataset("training set is empty".into()))?;
        let shape = image_to_tensor(&first.uniform_image).shape();
        let mut set = Self { uniform: Vec::new(), relit: Vec::new(), category: Vec::new(), shape };
        for s in samples {
            let u = image_to_tensor(&s.uniform_image);
            if u.shape() != shape {
                return Err(Error::Dataset(format!("scene {} has a different image size", s.scene_id)));
            }
            set.uniform.push(u);
            set.relit.push(s.relit_images.iter().map(image_to_tensor).collect());
            set.category.push(s.category_id);
        }
        Ok(set)
    }

    pub fn num_scenes(&self) -> usize {
        self.uniform.len()
    }

    /// Every (scene, direction) pair.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.num_scenes()).flat_map(|s| (0..self.relit[s].len()).map(move |d| (s, d))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    /// Passes over every (scene, direction) pair.
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub cond_dropout: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Timesteps are drawn uniformly from this fraction of the schedule.
    pub t_range: (f64, f64),
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-3,
            batch: 32,
            seed: 0,
            cond_dropout: 0.1,
            weight_decay: 0.01,
            grad_clip: 1.0,
            t_range: (0.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterTrainConfig {
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub cond_dropout: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Timesteps are drawn uniformly from this fraction of the schedule.
    pub t_range: (f64, f64),
    /// Iterations per entry of the reported loss curve.
    pub log_every: usize,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        Self {
            iters: 5000,
            lr: 2e-3,
            batch: 8,
            seed: 0,
            cond_dropout: 0.1,
            weight_decay: 0.01,
            grad_clip: 1.0,
            t_range: (0.25, 1.0),
            log_every: 250,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss per epoch (denoiser) or per logging window (adapter).
    pub loss_curve: Vec<f64>,
    pub steps: u64,
}

fn validate_common(batch: usize, lr: f64, cond_dropout: f64, t_range: (f64, f64)) -> Result<()> {
    let (lo, hi) = t_range;
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::Validation(format!("t_range must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})")));
    }
    if batch == 0 {
        return Err(Error::Validation("batch must be positive".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..=1.0).contains(&cond_dropout) {
        return Err(Error::Validation(format!("cond_dropout must lie in [0, 1], got {cond_dropout}")));
    }
    Ok(())
}

struct Batch {
    x_t: Tensor,
    eps: Tensor,
    cond_image: Tensor,
    t: Vec<usize>,
    cond: Vec<ConditionSpec>,
}

fn randn(shape: Shape, rng: &mut seed::Rng) -> Tensor {
    Tensor::from_vec(shape, (0..shape.len()).map(|_| StandardNormal.sample(rng)).collect())
}

fn make_batch(
    set: &TrainingSet,
    pairs: &[(usize, usize)],
    schedule: &DiffusionSchedule,
    cond_dropout: f64,
    t_range: (f64, f64),
    rng: &mut seed::Rng,
) -> Batch {
    let n = schedule.num_steps;
    let lo = ((t_range.0 * n as f64).floor() as usize).min(n - 1);
    let hi = ((t_range.1 * n as f64).ceil() as usize).clamp(lo + 1, n);
    let x0 = Tensor::stack(&pairs.iter().map(|&(s, d)| &set.relit[s][d]).collect::<Vec<_>>());
    let cond_image = Tensor::stack(&pairs.iter().map(|&(s, _)| &set.uniform[s]).collect::<Vec<_>>());
    let t: Vec<usize> = pairs.iter().map(|_| rng.random_range(lo..hi)).collect();
    let cond: Vec<ConditionSpec> = pairs
        .iter()
        .map(|&(s, d)| {
            if rng.random_bool(cond_dropout) {
                ConditionSpec::null()
            } else {
                ConditionSpec::new(d, set.category[s])
            }
        })
        .collect();
    let eps = randn(x0.shape(), rng);
    let x_t = noised(&x0, &eps, &t, schedule);
    Batch { x_t, eps, cond_image, t, cond }
}

/// Per-element `alpha_t x + sigma_t eps` over a batch tensor.
pub fn noised(x0: &Tensor, eps: &Tensor, t: &[usize], schedule: &DiffusionSchedule) -> Tensor {
    let s = x0.shape();
    assert_eq!(t.len(), s.b);
    let mut out = x0.clone();
    for c in 0..s.c {
        for (b, &tb) in t.iter().enumerate() {
            let (a, sg) = (schedule.alpha[tb] as f32, schedule.sigma[tb] as f32);
            let e = eps.plane(c, b);
            for (o, &ev) in out.plane_mut(c, b).iter_mut().zip(e) {
                *o = a * *o + sg * ev;
            }
        }
    }
    out
}

fn optimizer(lr: f64, weight_decay: f64) -> AdamW {
    AdamW::new(AdamWConfig { lr: lr as f32, weight_decay: weight_decay as f32, ..AdamWConfig::default() })
}

fn check_finite(stage: &'static str, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage, step, detail: format!("loss = {loss}") })
    }
}

pub fn train_denoiser(
    denoiser: &mut Denoiser,
    set: &TrainingSet,
    schedule: &DiffusionSchedule,
    config: &DenoiserTrainConfig,
) -> Result<TrainReport> {
    validate_common(config.batch, config.lr, config.cond_dropout, config.t_range)?;
    if set.num_scenes() == 0 {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut rng = seed::derived_rng(config.seed, &[0x7_2A1E]);
    let mut opt = optimizer(config.lr, config.weight_decay);
    opt.exclude_from_decay(denoiser.embedding_tables());
    let mut pairs = set.pairs();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        pairs.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in pairs.chunks(config.batch) {
            let b = make_batch(set, chunk, schedule, config.cond_dropout, config.t_range, &mut rng);
            let mut g = Graph::new();
            let x = g.constant(b.x_t);
            let out = denoiser.forward(&mut g, true, x, &b.t, &b.cond, None);
            let loss = g.mse(out.eps, &b.eps);
            let lv = f64::from(g.value(loss).item());
            check_finite("train-scorer", report.steps as usize, lv)?;
            g.backward(loss);
            let mut grads = g.param_grads(&denoiser.store);
            if config.grad_clip > 0.0 {
                grads.clip_global_norm(config.grad_clip);
            }
            opt.step(&mut denoiser.store, &grads);
            report.steps += 1;
            total += lv * chunk.len() as f64;
            count += chunk.len();
        }
        let mean = total / count.max(1) as f64;
        log::info!("scorer epoch {}/{}: loss {mean:.5}", epoch + 1, config.epochs);
        report.loss_curve.push(mean);
    }
    denoiser.trained_steps += report.steps;
    Ok(report)
}

pub fn train_adapter(
    adapter: &mut Adapter,
    denoiser: &Denoiser,
    set: &TrainingSet,
    schedule: &DiffusionSchedule,
    config: &AdapterTrainConfig,
) -> Result<TrainReport> {
    validate_common(config.batch, config.lr, config.cond_dropout, config.t_range)?;
    if set.num_scenes() == 0 {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if adapter.target != denoiser.config.widths {
        return Err(Error::Validation("adapter was built for a different denoiser".into()));
    }
    let mut rng = seed::derived_rng(config.seed, &[0xADA_7E2]);
    let mut opt = optimizer(config.lr, config.weight_decay);
    opt.exclude_from_decay(adapter.embedding_tables());
    let mut pairs = set.pairs();
    pairs.shuffle(&mut rng);
    let mut cursor = 0;
    let mut report = TrainReport::default();
    let window = config.log_every.max(1);
    let (mut total, mut count) = (0.0, 0usize);
    for it in 0..config.iters {
        let mut chunk = Vec::with_capacity(config.batch);
        while chunk.len() < config.batch {
            if cursor == pairs.len() {
                pairs.shuffle(&mut rng);
                cursor = 0;
            }
            chunk.push(pairs[cursor]);
            cursor += 1;
        }
        let b = make_batch(set, &chunk, schedule, config.cond_dropout, config.t_range, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(b.x_t);
        let ci = g.constant(b.cond_image);
        let eps = Scorer::new(denoiser, Some(&*adapter)).forward(&mut g, true, x, &b.t, &b.cond, Some(ci));
        let loss = g.mse(eps, &b.eps);
        let lv = f64::from(g.value(loss).item());
        check_finite("train-adapter", it, lv)?;
        g.backward(loss);
        let mut grads = g.param_grads(&adapter.store);
        debug_assert_eq!(g.param_grads(&denoiser.store).populated(), 0);
        if config.grad_clip > 0.0 {
            grads.clip_global_norm(config.grad_clip);
        }
        opt.step(&mut adapter.store, &grads);
        report.steps += 1;
        total += lv;
        count += 1;
        if count == window || it + 1 == config.iters {
            let mean = total / count as f64;
            log::info!("adapter iter {}/{}: loss {mean:.5}", it + 1, config.iters);
            report.loss_curve.push(mean);
            total = 0.0;
            count = 0;
        }
    }
    adapter.trained_steps += report.steps;
    Ok(report)
}
