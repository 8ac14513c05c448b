//! Colorization by variational score distillation into an RGBA overlay.

use layerlight_nn::{AdamW, AdamWConfig, Graph, Shape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::generator::{Generator, GeneratorConfig, GeneratorHead};
use super::relight::{TraceRow, CFG_WARN_THRESHOLD};
use super::sds::{batch_mean, randn, sample_timesteps, vsd_grad};
use crate::compose::compose_alpha;
use crate::diffusion::convert::{image_to_tensor, tensor_values};
use crate::diffusion::train::noised;
use crate::diffusion::{cfg_predict, Adapter, AdapterConfig, ConditionSpec, Denoiser, DiffusionSchedule, GuidanceMode, NoisePredictor, Scorer};
use crate::error::{Error, Result};
use crate::image::{LinearImage, RgbaLayer, LUMA_WEIGHTS};
use crate::seed;

/// A differentiable penalty tying the edited image's structure to the base.
pub trait StructureRegularizer: Sync {
    /// Scalar loss for `edited` (`[3, 1, h, w]`) against the constant `base`.
    fn loss(&self, g: &mut Graph, edited: Var, base: &Tensor) -> Var;
}

/// Mean squared difference of Sobel edge magnitudes of luminance.
#[derive(Clone, Copy, Debug, Default)]
pub struct EdgeMapRegularizer;

const SOBEL_X: [f32; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f32; 9] = [1.0, 2.0, 1.0, 0.0, 0.0, 0.0, -1.0, -2.0, -1.0];

/// Edge magnitude of luminance, `[1, b, h, w]`.
pub fn edge_map(g: &mut Graph, x: Var) -> Var {
    let luma = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 3), LUMA_WEIGHTS.map(|v| v as f32).to_vec()));
    let lum = g.conv2d(x, luma, None, 1, 1);
    let mut k: Vec<f32> = SOBEL_X.iter().map(|v| v / 8.0).collect();
    k.extend(SOBEL_Y.iter().map(|v| v / 8.0));
    let sobel = g.constant(Tensor::from_vec(Shape::new(2, 1, 1, 9), k));
    let grad = g.conv2d(lum, sobel, None, 3, 1);
    g.edge_magnitude(grad)
}

pub fn edge_map_values(img: &LinearImage) -> Vec<f32> {
    let mut g = Graph::inference();
    let x = g.constant(image_to_tensor(img));
    let e = edge_map(&mut g, x);
    g.value(e).data().to_vec()
}

/// Root-mean-square difference between the edge maps of two images.
pub fn edge_map_distance(a: &LinearImage, b: &LinearImage) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::Dimension("edge map distance of differently sized images".into()));
    }
    let (ea, eb) = (edge_map_values(a), edge_map_values(b));
    let s: f64 = ea.iter().zip(&eb).map(|(&x, &y)| f64::from(x - y).powi(2)).sum();
    Ok((s / ea.len() as f64).sqrt())
}

impl StructureRegularizer for EdgeMapRegularizer {
    fn loss(&self, g: &mut Graph, edited: Var, base: &Tensor) -> Var {
        let mut gi = Graph::inference();
        let b = gi.constant(base.clone());
        let target = edge_map(&mut gi, b);
        let target = gi.value(target).clone();
        let e = edge_map(g, edited);
        g.mse(e, &target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorizeConfig {
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub cfg_scale: f64,
    pub structure_weight: f64,
    pub t_range: (f64, f64),
    pub seed: u64,
    pub weight_decay: f64,
    pub guidance: GuidanceMode,
    pub generator: GeneratorConfig,
    /// Learning rate of the co-trained score head.
    pub learned_lr: f64,
    pub learned_head: AdapterConfig,
}

impl Default for ColorizeConfig {
    fn default() -> Self {
        Self {
            iters: 4000,
            lr: 5e-3,
            batch: 4,
            cfg_scale: 8.0,
            structure_weight: 2000.0,
            t_range: (0.02, 0.98),
            seed: 0,
            weight_decay: 0.01,
            guidance: GuidanceMode::NullTokens,
            generator: GeneratorConfig::default(),
            learned_lr: 1e-3,
            learned_head: AdapterConfig { widths: [16, 32, 32], ..AdapterConfig::default() },
        }
    }
}

impl ColorizeConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.t_range;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Validation(format!("t_range must satisfy 0 <= t_min < t_max <= 1, got ({lo}, {hi})")));
        }
        if self.batch == 0 || !(self.lr > 0.0) || !(self.learned_lr > 0.0) || !(self.structure_weight >= 0.0) {
            return Err(Error::Validation("batch and learning rates must be positive, structure_weight non-negative".into()));
        }
        if self.cfg_scale > CFG_WARN_THRESHOLD {
            log::warn!("cfg scale {} exceeds {CFG_WARN_THRESHOLD}; expect oversaturated edits", self.cfg_scale);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ColorizeResult {
    pub layer: RgbaLayer,
    /// Recomputed from the stored layer with [`compose_alpha`].
    pub edited: LinearImage,
    pub trace: Vec<TraceRow>,
    pub config: ColorizeConfig,
}

/// A trainable score head on top of the frozen denoiser, conditioned on the
/// sketch, fitted to the distribution of the current edits.
pub struct LearnedScore<'a> {
    pub denoiser: &'a Denoiser,
    pub head: Adapter,
    opt: AdamW,
}

impl<'a> LearnedScore<'a> {
    pub fn new(denoiser: &'a Denoiser, config: AdapterConfig, lr: f64, seed: u64) -> Self {
        let head = Adapter::for_denoiser(config, denoiser, seed);
        let mut opt = AdamW::new(AdamWConfig::with_lr(lr as f32));
        opt.exclude_from_decay(head.embedding_tables());
        Self { denoiser, head, opt }
    }

    pub fn scorer(&self) -> Scorer<'_> {
        Scorer::new(self.denoiser, Some(&self.head))
    }

    /// Denoising loss on a fixed batch, without updating.
    pub fn loss(&self, x_t: &Tensor, eps: &Tensor, t: &[usize], cond: &[ConditionSpec], cond_image: &Tensor) -> f64 {
        let est = self.scorer().predict_noise(x_t, t, cond, Some(cond_image));
        est.zip_map(eps, |a, b| a - b).sq_norm() / est.len() as f64
    }

    /// One optimizer step of the denoising loss; returns the loss before it.
    pub fn train_step(&mut self, x_t: &Tensor, eps: &Tensor, t: &[usize], cond: &[ConditionSpec], cond_image: &Tensor) -> f64 {
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let ci = g.constant(cond_image.clone());
        let est = Scorer::new(self.denoiser, Some(&self.head)).forward(&mut g, true, x, t, cond, Some(ci));
        let loss = g.mse(est, eps);
        let lv = f64::from(g.value(loss).item());
        g.backward(loss);
        let grads = g.param_grads(&self.head.store);
        self.opt.step(&mut self.head.store, &grads);
        self.head.trained_steps += 1;
        lv
    }
}

/// `category` conditions both heads; the direction token is always null.
pub fn distill_colorize(
    base_sketch: &LinearImage,
    category: Option<usize>,
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    config: &ColorizeConfig,
    structure_reg: &dyn StructureRegularizer,
) -> Result<ColorizeResult> {
    if !denoiser.is_trained() {
        return Err(Error::Untrained("denoiser"));
    }
    config.validate()?;
    let cond = ConditionSpec { direction: None, category };
    cond.validate()?;
    let base = image_to_tensor(base_sketch);
    let mut gen = Generator::new(config.generator.clone(), GeneratorHead::Colorize, config.seed);
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr as f32,
        weight_decay: config.weight_decay as f32,
        ..AdamWConfig::default()
    });
    let mut learned = LearnedScore::new(denoiser, config.learned_head.clone(), config.learned_lr, config.seed);
    let mut rng = seed::derived_rng(config.seed, &[0xC010]);
    let b = config.batch;
    let conds = vec![cond; b];
    let ci = base.repeat_batch(b);
    let sw = config.structure_weight as f32;
    let mut trace = Vec::with_capacity(config.iters);
    for iter in 0..config.iters {
        let mut g = Graph::new();
        let bv = g.constant(base.clone());
        let out = gen.forward(&mut g, bv);
        let edited = g.alpha_over(&base, out.layers[0], out.layers[1]);

        let x = g.value(edited).repeat_batch(b);
        let t = sample_timesteps(schedule, config.t_range, b, &mut rng);
        let eps = randn(x.shape(), &mut rng);
        let x_t = noised(&x, &eps, &t, schedule);
        let pre = cfg_predict(denoiser, &x_t, &t, &conds, None, config.cfg_scale, config.guidance);
        let lrn = learned.scorer().predict_noise(&x_t, &t, &conds, Some(&ci));
        let upstream = batch_mean(&vsd_grad(&x, &t, &pre, &lrn, schedule)?);

        let sl = structure_reg.loss(&mut g, edited, &base);
        let reg = g.weighted_sum(&[(sl, sw)]);
        let reg_value = f64::from(g.value(reg).item());
        g.backward_with(vec![(edited, upstream.clone()), (reg, Tensor::scalar(1.0))]);
        let grads = g.param_grads(&gen.store);
        let row = TraceRow {
            iter,
            sds_residual_norm: upstream.sq_norm().sqrt(),
            reg_value,
            total_grad_norm: grads.global_norm(),
        };
        if !(row.sds_residual_norm.is_finite() && reg_value.is_finite() && grads.all_finite()) {
            return Err(Error::NonFinite { stage: "colorize", step: iter, detail: format!("{row:?}") });
        }
        opt.step(&mut gen.store, &grads);

        // Fit the learned head to the current edit with fresh noise.
        let t2 = sample_timesteps(schedule, (0.0, 1.0), b, &mut rng);
        let eps2 = randn(x.shape(), &mut rng);
        let x_t2 = noised(&x, &eps2, &t2, schedule);
        learned.train_step(&x_t2, &eps2, &t2, &conds, &ci);
        trace.push(row);
    }
    let mut g = Graph::inference();
    let bv = g.constant(base.clone());
    let out = gen.forward(&mut g, bv);
    let rgb = tensor_values(g.value(out.layers[0]), 0);
    let alpha: Vec<f64> = g.value(out.layers[1]).data().iter().map(|&v| f64::from(v)).collect();
    let layer = RgbaLayer::new(base_sketch.width(), base_sketch.height(), rgb, alpha)?;
    let edited = compose_alpha(base_sketch, &layer)?;
    Ok(ColorizeResult { layer, edited, trace, config: config.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_map_of_flat_image_is_uniform_inside() {
        let img = LinearImage::filled(8, 8, [0.5; 3]).unwrap();
        let e = edge_map_values(&img);
        // Interior pixels see no gradient; borders see the zero padding.
        assert!((e[3 * 8 + 3] - 1e-3).abs() < 1e-6);
        assert!(e[0] > 0.01);
        assert_eq!(edge_map_distance(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn sobel_responds_to_vertical_step() {
        let img = LinearImage::from_fn(8, 8, |x, _| if x < 4 { [0.0; 3] } else { [1.0; 3] }).unwrap();
        let e = edge_map_values(&img);
        // Full step across the 3x3 window: (1 + 2 + 1) / 8.
        assert!((e[3 * 8 + 3] - 0.5).abs() < 1e-3, "{}", e[3 * 8 + 3]);
        assert!(e[3 * 8 + 1] < 0.01);
    }
}
