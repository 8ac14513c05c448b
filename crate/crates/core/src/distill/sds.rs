//! Score-distillation gradients and the identity regularizer.

use layerlight_nn::{Shape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::image::LuminosityLayer;
use crate::seed;

fn residual(a: &Tensor, b: &Tensor, t: &[usize], schedule: &DiffusionSchedule) -> Result<Tensor> {
    let s = a.shape();
    if b.shape() != s {
        return Err(Error::Dimension(format!("noise fields differ in shape: {} vs {}", s, b.shape())));
    }
    if t.len() != s.b {
        return Err(Error::Dimension(format!("{} timesteps for a batch of {}", t.len(), s.b)));
    }
    for &tb in t {
        schedule.check_step(tb)?;
    }
    let mut out = a.zip_map(b, |x, y| x - y);
    for (bi, &tb) in t.iter().enumerate() {
        let w = schedule.weight[tb] as f32;
        if w != 1.0 {
            for c in 0..s.c {
                out.plane_mut(c, bi).iter_mut().for_each(|v| *v *= w);
            }
        }
    }
    Ok(out)
}

/// Per-batch-element upstream gradient `w(t) * (eps_hat - eps)` at the edited
/// image. The scorer's Jacobian is never formed.
pub fn sds_grad(
    edited: &Tensor,
    t: &[usize],
    eps: &Tensor,
    noise_estimate: &Tensor,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    if edited.shape() != eps.shape() {
        return Err(Error::Dimension(format!("edited batch {} vs noise {}", edited.shape(), eps.shape())));
    }
    residual(noise_estimate, eps, t, schedule)
}

/// `w(t) * (eps_pretrained - eps_learned)`.
pub fn vsd_grad(
    edited: &Tensor,
    t: &[usize],
    pretrained_estimate: &Tensor,
    learned_estimate: &Tensor,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    if edited.shape() != pretrained_estimate.shape() {
        return Err(Error::Dimension(format!("edited batch {} vs estimate {}", edited.shape(), pretrained_estimate.shape())));
    }
    residual(pretrained_estimate, learned_estimate, t, schedule)
}

/// Average a `[c, b, h, w]` per-element gradient over the batch.
pub fn batch_mean(g: &Tensor) -> Tensor {
    let s = g.shape();
    let mut out = Tensor::zeros(Shape::new(s.c, 1, s.h, s.w));
    let k = 1.0 / s.b as f32;
    for c in 0..s.c {
        let dst = out.plane_mut(c, 0);
        for b in 0..s.b {
            for (d, &v) in dst.iter_mut().zip(g.plane(c, b)) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|v| *v *= k);
    }
    out
}

/// Mean of `|1 - x|` over the layer.
pub fn reg_loss(layer: &LuminosityLayer) -> f64 {
    let d = layer.data();
    d.iter().map(|v| (1.0 - v).abs()).sum::<f64>() / d.len().max(1) as f64
}

/// Timesteps drawn uniformly from `[t_min, t_max]` as fractions of the schedule.
pub fn sample_timesteps(schedule: &DiffusionSchedule, t_range: (f64, f64), n: usize, rng: &mut seed::Rng) -> Vec<usize> {
    let lo = schedule.step_at(t_range.0);
    let hi = schedule.step_at(t_range.1).max(lo);
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

pub fn randn(shape: Shape, rng: &mut seed::Rng) -> Tensor {
    Tensor::from_vec(shape, (0..shape.len()).map(|_| StandardNormal.sample(rng)).collect())
}
