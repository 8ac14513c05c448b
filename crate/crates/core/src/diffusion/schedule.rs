//! Variance-preserving noise schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LinearImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
}

/// Offset of the cosine schedule, keeping `alpha` near 1 at the first step.
pub const COSINE_OFFSET: f64 = 0.008;
/// `alpha_bar` never drops below this, so `x_0` estimates stay finite.
pub const MIN_ALPHA_BAR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub num_steps: usize,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
    pub weight: Vec<f64>,
}

pub fn make_schedule(num_steps: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if num_steps < 10 {
        return Err(Error::Validation(format!("schedule needs at least 10 steps, got {num_steps}")));
    }
    let f = |u: f64| ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let f0 = f(0.0);
    let mut alpha = Vec::with_capacity(num_steps);
    let mut sigma = Vec::with_capacity(num_steps);
    for t in 0..num_steps {
        let abar = (f((t + 1) as f64 / num_steps as f64) / f0).clamp(MIN_ALPHA_BAR, 1.0);
        alpha.push(abar.sqrt());
        sigma.push((1.0 - abar).sqrt());
    }
    Ok(DiffusionSchedule { kind, num_steps, alpha, sigma, weight: vec![1.0; num_steps] })
}

impl DiffusionSchedule {
    pub fn cosine(num_steps: usize) -> Result<Self> {
        make_schedule(num_steps, ScheduleKind::Cosine)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.num_steps {
            return Err(Error::OutOfRange { what: "timestep", value: t as i64, range: "[0, num_steps)" });
        }
        Ok(())
    }

    /// Map a fraction of the schedule to a step index.
    pub fn step_at(&self, frac: f64) -> usize {
        ((frac * self.num_steps as f64).round() as usize).min(self.num_steps - 1)
    }

    pub fn with_weight(mut self, weight: impl Fn(usize) -> f64) -> Self {
        self.weight = (0..self.num_steps).map(weight).collect();
        self
    }
}

/// `alpha_t * x + sigma_t * eps` over interleaved RGB values.
pub fn add_noise(schedule: &DiffusionSchedule, x: &LinearImage, t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if eps.len() != x.data().len() {
        return Err(Error::Dimension(format!("noise has {} values, image has {}", eps.len(), x.data().len())));
    }
    let (a, s) = (schedule.alpha[t], schedule.sigma[t]);
    Ok(x.data().iter().zip(eps).map(|(&xv, &e)| a * xv + s * e).collect())
}
