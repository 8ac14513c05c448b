//! Relighting by score distillation into shade and light layers.

use layerlight_nn::{AdamW, AdamWConfig, Graph, Tensor};
use serde::{Deserialize, Serialize};

use super::generator::{Generator, GeneratorConfig, GeneratorHead};
use super::sds::{batch_mean, randn, sample_timesteps, sds_grad};
use crate::compose::compose_relight;
use crate::diffusion::convert::{image_to_tensor, plane_to_layer};
use crate::diffusion::train::noised;
use crate::diffusion::{cfg_predict, ConditionSpec, DiffusionSchedule, GuidanceMode, NoisePredictor, Scorer};
use crate::error::{Error, Result};
use crate::image::{LinearImage, LuminosityLayer};
use crate::seed;

/// Guidance scales above this are known to oversaturate.
pub const CFG_WARN_THRESHOLD: f64 = 15.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub cfg_scale: f64,
    pub reg_weight: f64,
    pub t_range: (f64, f64),
    pub seed: u64,
    pub weight_decay: f64,
    pub guidance: GuidanceMode,
    pub generator: GeneratorConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iters: 700,
            lr: 5e-3,
            batch: 4,
            cfg_scale: 10.0,
            reg_weight: 1.0,
            t_range: (0.02, 0.98),
            seed: 0,
            weight_decay: 0.01,
            guidance: GuidanceMode::NullTokens,
            generator: GeneratorConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.t_range;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Validation(format!("t_range must satisfy 0 <= t_min < t_max <= 1, got ({lo}, {hi})")));
        }
        if self.batch == 0 {
            return Err(Error::Validation("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.reg_weight >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Validation("reg_weight must be non-negative and cfg_scale finite".into()));
        }
        if self.cfg_scale > CFG_WARN_THRESHOLD {
            log::warn!("cfg scale {} exceeds {CFG_WARN_THRESHOLD}; expect oversaturated edits", self.cfg_scale);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// L2 norm of the batch-averaged distillation gradient at the image.
    pub sds_residual_norm: f64,
    /// Regularizer value (relight: `reg_weight * (reg(shade) + reg(light))`;
    /// colorize: `structure_weight * structure loss`).
    pub reg_value: f64,
    /// Global L2 norm of the generator's parameter gradient.
    pub total_grad_norm: f64,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iter,sds_residual_norm,reg_value,total_grad_norm\n");
    for r in trace {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", r.iter, r.sds_residual_norm, r.reg_value, r.total_grad_norm));
    }
    s
}

#[derive(Clone, Debug)]
pub struct DistillResult {
    pub shade: LuminosityLayer,
    pub light: LuminosityLayer,
    /// Recomputed from the stored layers with [`compose_relight`].
    pub edited: LinearImage,
    pub trace: Vec<TraceRow>,
    pub config: DistillConfig,
}

/// Diagnostics of a single optimization step.
#[derive(Clone, Debug)]
pub struct StepStats {
    pub row: TraceRow,
    /// Scorer parameters that received a gradient in the step's graph.
    pub scorer_grads_populated: usize,
}

pub struct RelightDistiller<'a> {
    model: &'a dyn NoisePredictor,
    scorer_stores: Vec<&'a layerlight_nn::ParamStore>,
    schedule: &'a DiffusionSchedule,
    base: Tensor,
    base_img: LinearImage,
    cond: ConditionSpec,
    pub generator: Generator,
    opt: AdamW,
    rng: seed::Rng,
    config: DistillConfig,
    iter: usize,
}

impl<'a> RelightDistiller<'a> {
    pub fn new(
        model: &'a dyn NoisePredictor,
        schedule: &'a DiffusionSchedule,
        base: &LinearImage,
        cond: ConditionSpec,
        config: &DistillConfig,
    ) -> Result<Self> {
        config.validate()?;
        cond.validate()?;
        Ok(Self {
            model,
            scorer_stores: Vec::new(),
            schedule,
            base: image_to_tensor(base),
            base_img: base.clone(),
            cond,
            generator: Generator::new(config.generator.clone(), GeneratorHead::Relight, config.seed),
            opt: AdamW::new(AdamWConfig {
                lr: config.lr as f32,
                weight_decay: config.weight_decay as f32,
                ..AdamWConfig::default()
            }),
            rng: seed::derived_rng(config.seed, &[0xD157]),
            config: config.clone(),
            iter: 0,
        })
    }

    /// Register scorer parameter stores whose gradients a step must leave empty.
    pub fn watch_scorer(mut self, scorer: &Scorer<'a>) -> Self {
        self.scorer_stores.push(&scorer.denoiser.store);
        if let Some(a) = scorer.adapter {
            self.scorer_stores.push(&a.store);
        }
        self
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let base = g.constant(self.base.clone());
        let out = self.generator.forward(&mut g, base);
        let (shade, light) = (out.layers[0], out.layers[1]);
        let edited = g.relight(&self.base, shade, light);

        let b = cfg.batch;
        let x = g.value(edited).repeat_batch(b);
        let t = sample_timesteps(self.schedule, cfg.t_range, b, &mut self.rng);
        let eps = randn(x.shape(), &mut self.rng);
        let x_t = noised(&x, &eps, &t, self.schedule);
        let conds = vec![self.cond; b];
        let ci = self.base.repeat_batch(b);
        let est = cfg_predict(self.model, &x_t, &t, &conds, Some(&ci), cfg.cfg_scale, cfg.guidance);
        let upstream = batch_mean(&sds_grad(&x, &t, &eps, &est, self.schedule)?);

        let rs = g.l1_from_one(shade);
        let rl = g.l1_from_one(light);
        let w = cfg.reg_weight as f32;
        let reg = g.weighted_sum(&[(rs, w), (rl, w)]);
        let reg_value = f64::from(g.value(reg).item());
        g.backward_with(vec![(edited, upstream.clone()), (reg, Tensor::scalar(1.0))]);
        let grads = g.param_grads(&self.generator.store);
        let scorer_grads_populated = self.scorer_stores.iter().map(|s| g.param_grads(s).populated()).sum();
        let row = TraceRow {
            iter: self.iter,
            sds_residual_norm: upstream.sq_norm().sqrt(),
            reg_value,
            total_grad_norm: grads.global_norm(),
        };
        if !(row.sds_residual_norm.is_finite() && reg_value.is_finite() && grads.all_finite()) {
            return Err(Error::NonFinite { stage: "distill", step: self.iter, detail: format!("{row:?}") });
        }
        self.opt.step(&mut self.generator.store, &grads);
        self.iter += 1;
        Ok(StepStats { row, scorer_grads_populated })
    }

    /// Current layers and the composed image, in f64.
    pub fn layers(&self) -> Result<(LuminosityLayer, LuminosityLayer, LinearImage)> {
        let mut g = Graph::inference();
        let base = g.constant(self.base.clone());
        let out = self.generator.forward(&mut g, base);
        let shade = plane_to_layer(g.value(out.layers[0]), 0)?;
        let light = plane_to_layer(g.value(out.layers[1]), 0)?;
        let edited = compose_relight(&self.base_img, &shade, &light)?;
        Ok((shade, light, edited))
    }

    pub fn run(mut self) -> Result<DistillResult> {
        let mut trace = Vec::with_capacity(self.config.iters);
        for _ in 0..self.config.iters {
            trace.push(self.step()?.row);
        }
        let (shade, light, edited) = self.layers()?;
        Ok(DistillResult { shade, light, edited, trace, config: self.config })
    }
}

/// Distill with an arbitrary noise predictor (no trained-model check).
pub fn distill_relight_with(
    model: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    base: &LinearImage,
    cond: ConditionSpec,
    config: &DistillConfig,
) -> Result<DistillResult> {
    RelightDistiller::new(model, schedule, base, cond, config)?.run()
}

/// Relight `base` toward light `direction` using the trained scorer and
/// adapter. The adapter is conditioned on `base` itself.
pub fn distill_relight(
    base: &LinearImage,
    direction: usize,
    category: Option<usize>,
    scorer: &Scorer<'_>,
    schedule: &DiffusionSchedule,
    config: &DistillConfig,
) -> Result<DistillResult> {
    scorer.ensure_trained()?;
    if scorer.adapter.is_none() {
        return Err(Error::Untrained("adapter"));
    }
    let cond = ConditionSpec { direction: Some(direction), category };
    distill_relight_with(scorer, schedule, base, cond, config)
}
