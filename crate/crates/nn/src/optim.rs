//! Adam with decoupled weight decay.

use crate::graph::Grads;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct AdamState {
    m: Tensor,
    v: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: Vec<Option<AdamState>>,
    no_decay: Vec<usize>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, state: Vec::new(), no_decay: Vec::new() }
    }

    /// Exempt parameters from weight decay (typically embedding tables, so
    /// rows that are never looked up stay exactly as initialised).
    pub fn exclude_from_decay(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.no_decay.extend(ids.into_iter().map(ParamId::index));
        self.no_decay.sort_unstable();
        self.no_decay.dedup();
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient are left untouched,
    /// including weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        assert_eq!(grads.store_id(), store.id(), "gradients belong to a different parameter store");
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            let st = self.state[id.index()].get_or_insert_with(|| AdamState {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let wd = if self.no_decay.binary_search(&id.index()).is_ok() { 0.0 } else { c.weight_decay };
            let pd = p.data_mut();
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                pd[i] -= c.lr * (mh / (vh.sqrt() + c.eps) + wd * pd[i]);
            }
        }
    }
}
