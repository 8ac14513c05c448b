//! Ancestral sampling on an evenly respaced subset of the schedule.

use layerlight_nn::{Shape, Tensor};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::convert::{image_to_tensor, tensor_to_image};
use super::model::{cfg_predict, ConditionSpec, GuidanceMode, NoisePredictor};
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::image::LinearImage;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub guidance: GuidanceMode,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 50, cfg_scale: 1.0, guidance: GuidanceMode::NullTokens, seed: 0 }
    }
}

/// `steps` timesteps evenly spaced from `last` down to 0.
fn respaced_steps(last: usize, steps: usize) -> Vec<usize> {
    if steps == 1 {
        return vec![last];
    }
    let mut ts: Vec<usize> = (0..steps).rev().map(|k| (last * k + (steps - 1) / 2) / (steps - 1)).collect();
    ts.dedup();
    ts
}

/// Draw one image. With `steps == 0` the initial noise is returned, clamped.
pub fn sample(
    model: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    cond: ConditionSpec,
    cond_image: Option<&LinearImage>,
    size: (usize, usize),
    config: &SampleConfig,
) -> Result<LinearImage> {
    cond.validate()?;
    let (w, h) = size;
    if let Some(ci) = cond_image {
        if ci.width() != w || ci.height() != h {
            return Err(Error::Dimension(format!("conditioning image is {}x{}, sample is {w}x{h}", ci.width(), ci.height())));
        }
    }
    if config.steps > schedule.num_steps {
        return Err(Error::Validation(format!("{} sampling steps exceed the schedule length", config.steps)));
    }
    let mut rng = seed::derived_rng(config.seed, &[0x5A_3B1E]);
    let shape = Shape::new(3, 1, h, w);
    let randn = |rng: &mut seed::Rng| -> Tensor {
        Tensor::from_vec(shape, (0..shape.len()).map(|_| StandardNormal.sample(rng)).collect())
    };
    let mut x = randn(&mut rng);
    if config.steps == 0 {
        return tensor_to_image(&x, 0);
    }
    let ci = cond_image.map(image_to_tensor);
    let last = schedule.num_steps - 1;
    let ts = respaced_steps(last, config.steps);
    for (k, &t) in ts.iter().enumerate() {
        let eps = cfg_predict(model, &x, &[t], &[cond], ci.as_ref(), config.cfg_scale, config.guidance);
        let (a, s) = (schedule.alpha[t] as f32, schedule.sigma[t] as f32);
        let x0 = x.zip_map(&eps, |xv, e| ((xv - s * e) / a).clamp(0.0, 1.0));
        let Some(&tp) = ts.get(k + 1) else {
            x = x0;
            break;
        };
        let (ap, sp) = (schedule.alpha[tp] as f32, schedule.sigma[tp] as f32);
        // Posterior q(x_prev | x_t, x0) of the respaced chain.
        let a_ratio = a / ap;
        let var_t = (1.0 - a_ratio * a_ratio).max(0.0);
        let sd = (sp * sp / (s * s) * var_t).max(0.0).sqrt();
        let dir = (sp * sp - sd * sd).max(0.0).sqrt();
        let eps_hat = x.zip_map(&x0, |xv, x0v| (xv - a * x0v) / s);
        let z = randn(&mut rng);
        let mut next = x0.zip_map(&eps_hat, |x0v, e| ap * x0v + dir * e);
        next = next.zip_map(&z, |v, zv| v + sd * zv);
        x = next;
    }
    tensor_to_image(&x, 0)
}
