//! Convolutional denoiser, zero-initialised conditioning adapter and
//! classifier-free guidance.

use layerlight_nn::{sinusoidal_features, Bind, Conv2d, Embedding, Graph, Init, Linear, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{NUM_CATEGORIES, NUM_DIRECTIONS};
use crate::seed;

/// Conditioning tokens; `None` selects the learned null embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub direction: Option<usize>,
    pub category: Option<usize>,
}

impl ConditionSpec {
    pub fn new(direction: usize, category: usize) -> Self {
        Self { direction: Some(direction), category: Some(category) }
    }

    pub fn null() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.direction {
            if d >= NUM_DIRECTIONS {
                return Err(Error::OutOfRange { what: "direction index", value: d as i64, range: "[0, 12)" });
            }
        }
        if let Some(c) = self.category {
            if c >= NUM_CATEGORIES {
                return Err(Error::OutOfRange { what: "category", value: c as i64, range: "[0, 8)" });
            }
        }
        Ok(())
    }

    fn direction_token(&self) -> usize {
        self.direction.unwrap_or(NUM_DIRECTIONS)
    }

    fn category_token(&self) -> usize {
        self.category.unwrap_or(NUM_CATEGORIES)
    }
}

/// How the unconditional branch of classifier-free guidance is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// Null direction and category tokens in both the denoiser and the
    /// adapter; the adapter still sees the conditioning image.
    #[default]
    NullTokens,
    /// Null tokens and no adapter at all.
    DropAdapter,
}

pub trait NoisePredictor: Sync {
    /// Predict the noise in `x_t` (`[3, b, h, w]`). `cond_image` has the same
    /// shape as `x_t` when present.
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], cond: &[ConditionSpec], cond_image: Option<&Tensor>) -> Tensor;
}

/// `(1 - s) * uncond + s * cond`, i.e. `uncond + s * (cond - uncond)`.
pub fn guidance_combine(uncond: &Tensor, cond: &Tensor, scale: f64) -> Tensor {
    let s = scale as f32;
    uncond.zip_map(cond, |u, c| (1.0 - s) * u + s * c)
}

/// Classifier-free guided noise estimate from two separate forward passes.
pub fn cfg_predict(
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    t: &[usize],
    cond: &[ConditionSpec],
    cond_image: Option<&Tensor>,
    scale: f64,
    mode: GuidanceMode,
) -> Tensor {
    let c = model.predict_noise(x_t, t, cond, cond_image);
    let nulls = vec![ConditionSpec::null(); cond.len()];
    let u_img = match mode {
        GuidanceMode::NullTokens => cond_image,
        GuidanceMode::DropAdapter => None,
    };
    let u = model.predict_noise(x_t, t, &nulls, u_img);
    guidance_combine(&u, &c, scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Channels at 1/2, 1/4 and 1/8 of the image resolution.
    pub widths: [usize; 3],
    pub emb_dim: usize,
    pub time_features: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { widths: [32, 64, 64], emb_dim: 64, time_features: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub widths: [usize; 3],
    pub emb_dim: usize,
    pub time_features: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { widths: [32, 48, 64], emb_dim: 64, time_features: 32 }
    }
}

fn bind(store: &ParamStore, trainable: bool) -> Bind<'_> {
    if trainable {
        Bind::trainable(store)
    } else {
        Bind::frozen(store)
    }
}

struct CondEmbed {
    time1: Linear,
    time2: Linear,
    direction: Embedding,
    category: Embedding,
    time_features: usize,
}

impl CondEmbed {
    fn new(store: &mut ParamStore, name: &str, time_features: usize, dim: usize, rng: &mut seed::Rng) -> Self {
        Self {
            time1: Linear::new(store, &format!("{name}.time1"), time_features, dim, Init::He, rng),
            time2: Linear::new(store, &format!("{name}.time2"), dim, dim, Init::He, rng),
            direction: Embedding::new(store, &format!("{name}.direction"), NUM_DIRECTIONS + 1, dim, 0.5, rng),
            category: Embedding::new(store, &format!("{name}.category"), NUM_CATEGORIES + 1, dim, 0.5, rng),
            time_features,
        }
    }

    fn tables(&self) -> [ParamId; 2] {
        [self.direction.table, self.category.table]
    }

    /// `silu(embedding)`, `[dim, b, 1, 1]`.
    fn forward(&self, g: &mut Graph, p: &Bind<'_>, t: &[usize], cond: &[ConditionSpec]) -> Var {
        let tv: Vec<f32> = t.iter().map(|&v| v as f32).collect();
        let tf = g.constant(sinusoidal_features(&tv, self.time_features));
        let h = self.time1.forward(g, p, tf);
        let h = g.silu(h);
        let h = self.time2.forward(g, p, h);
        let d: Vec<usize> = cond.iter().map(ConditionSpec::direction_token).collect();
        let c: Vec<usize> = cond.iter().map(ConditionSpec::category_token).collect();
        let dv = self.direction.forward(g, p, &d);
        let cv = self.category.forward(g, p, &c);
        let e = g.add(h, dv);
        let e = g.add(e, cv);
        g.silu(e)
    }
}

struct ResBlock {
    conv1: Conv2d,
    emb: Linear,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, ch: usize, emb_dim: usize, rng: &mut seed::Rng) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), ch, ch, 3, 1, Init::He, rng),
            emb: Linear::new(store, &format!("{name}.emb"), emb_dim, 2 * ch, Init::Normal(0.05), rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), ch, ch, 3, 1, Init::Zero, rng),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bind<'_>, x: Var, emb: Var) -> Var {
        let h = g.silu(x);
        let h = self.conv1.forward(g, p, h);
        let e = self.emb.forward(g, p, emb);
        let ch = g.shape(h).c;
        let scale = g.slice_channels(e, 0, ch);
        let shift = g.slice_channels(e, ch, ch);
        let h = g.scale_shift(h, scale, shift);
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        g.add(x, h)
    }
}

/// Additive features for the denoiser's decoder, by stage.
#[derive(Clone, Copy, Debug)]
pub struct Injections {
    pub half: Var,
    pub quarter: Var,
    pub mid: Var,
}

pub struct DenoiserOutput {
    pub eps: Var,
    /// Bottleneck activations before any injection.
    pub mid: Var,
}

struct DenoiserNet {
    embed: CondEmbed,
    conv_in: Conv2d,
    enc1: ResBlock,
    down1: Conv2d,
    enc2: ResBlock,
    down2: Conv2d,
    mid: ResBlock,
    proj2: Conv2d,
    dec2: ResBlock,
    proj1: Conv2d,
    dec1: ResBlock,
    conv_out: Conv2d,
}

pub struct Denoiser {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    /// Optimizer steps taken so far; zero means untrained.
    pub trained_steps: u64,
    net: DenoiserNet,
}

fn check_image_dims(x: &Tensor) {
    let s = x.shape();
    assert!(s.c == 3 && s.h % 8 == 0 && s.w % 8 == 0, "scorer input must be [3, b, 8k, 8m], got {s}");
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = seed::derived_rng(seed, &[0xDE_0015E]);
        let mut store = ParamStore::new();
        let [w1, w2, w3] = config.widths;
        let e = config.emb_dim;
        let s = &mut store;
        let r = &mut rng;
        let net = DenoiserNet {
            embed: CondEmbed::new(s, "embed", config.time_features, e, r),
            conv_in: Conv2d::new(s, "conv_in", 12, w1, 3, 1, Init::He, r),
            enc1: ResBlock::new(s, "enc1", w1, e, r),
            down1: Conv2d::new(s, "down1", w1, w2, 3, 2, Init::He, r),
            enc2: ResBlock::new(s, "enc2", w2, e, r),
            down2: Conv2d::new(s, "down2", w2, w3, 3, 2, Init::He, r),
            mid: ResBlock::new(s, "mid", w3, e, r),
            proj2: Conv2d::new(s, "proj2", w3, w2, 1, 1, Init::He, r),
            dec2: ResBlock::new(s, "dec2", w2, e, r),
            proj1: Conv2d::new(s, "proj1", w2, w1, 1, 1, Init::He, r),
            dec1: ResBlock::new(s, "dec1", w1, e, r),
            conv_out: Conv2d::new(s, "conv_out", w1, 12, 3, 1, Init::Normal(1e-3), r),
        };
        log::info!("denoiser: {} parameters", store.num_scalars());
        Self { config, store, trained_steps: 0, net }
    }

    pub fn embedding_tables(&self) -> [ParamId; 2] {
        self.net.embed.tables()
    }

    pub fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        trainable: bool,
        x_t: Var,
        t: &[usize],
        cond: &[ConditionSpec],
        inject: Option<&Injections>,
    ) -> DenoiserOutput {
        let p = bind(&self.store, trainable);
        let n = &self.net;
        let emb = n.embed.forward(g, &p, t, cond);
        let x = g.space_to_depth(x_t);
        let h = n.conv_in.forward(g, &p, x);
        let skip1 = n.enc1.forward(g, &p, h, emb);
        let h = n.down1.forward(g, &p, skip1);
        let skip2 = n.enc2.forward(g, &p, h, emb);
        let h = n.down2.forward(g, &p, skip2);
        let mid = n.mid.forward(g, &p, h, emb);
        let mut h = mid;
        if let Some(inj) = inject {
            h = g.add(h, inj.mid);
        }
        let h = n.proj2.forward(g, &p, h);
        let h = g.upsample2(h);
        let mut h = g.add(h, skip2);
        if let Some(inj) = inject {
            h = g.add(h, inj.quarter);
        }
        let h = n.dec2.forward(g, &p, h, emb);
        let h = n.proj1.forward(g, &p, h);
        let h = g.upsample2(h);
        let mut h = g.add(h, skip1);
        if let Some(inj) = inject {
            h = g.add(h, inj.half);
        }
        let h = n.dec1.forward(g, &p, h, emb);
        let h = g.silu(h);
        let h = n.conv_out.forward(g, &p, h);
        DenoiserOutput { eps: g.depth_to_space(h), mid }
    }

    /// Bottleneck activations for a clean image batch at `t = 0` with null
    /// conditioning.
    pub fn features(&self, x: &Tensor) -> Tensor {
        check_image_dims(x);
        let mut g = Graph::inference();
        let b = x.shape().b;
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, false, xv, &vec![0; b], &vec![ConditionSpec::null(); b], None);
        g.value(out.mid).clone()
    }
}

struct AdapterNet {
    embed: CondEmbed,
    conv_in: Conv2d,
    enc1: ResBlock,
    zero1: Conv2d,
    down1: Conv2d,
    enc2: ResBlock,
    zero2: Conv2d,
    down2: Conv2d,
    enc3: ResBlock,
    zero3: Conv2d,
}

/// Conditioning branch that reads the conditioning image alongside `x_t`
/// and feeds the denoiser's decoder through zero-initialised 1x1 convs.
pub struct Adapter {
    pub config: AdapterConfig,
    pub target: [usize; 3],
    pub store: ParamStore,
    pub trained_steps: u64,
    net: AdapterNet,
}

impl Adapter {
    /// `target` are the denoiser's stage widths.
    pub fn new(config: AdapterConfig, target: [usize; 3], seed: u64) -> Self {
        let mut rng = seed::derived_rng(seed, &[0xADA_97E5]);
        let mut store = ParamStore::new();
        let [a1, a2, a3] = config.widths;
        let [w1, w2, w3] = target;
        let e = config.emb_dim;
        let s = &mut store;
        let r = &mut rng;
        let net = AdapterNet {
            embed: CondEmbed::new(s, "embed", config.time_features, e, r),
            conv_in: Conv2d::new(s, "conv_in", 24, a1, 3, 1, Init::He, r),
            enc1: ResBlock::new(s, "enc1", a1, e, r),
            zero1: Conv2d::new(s, "zero1", a1, w1, 1, 1, Init::Zero, r),
            down1: Conv2d::new(s, "down1", a1, a2, 3, 2, Init::He, r),
            enc2: ResBlock::new(s, "enc2", a2, e, r),
            zero2: Conv2d::new(s, "zero2", a2, w2, 1, 1, Init::Zero, r),
            down2: Conv2d::new(s, "down2", a2, a3, 3, 2, Init::He, r),
            enc3: ResBlock::new(s, "enc3", a3, e, r),
            zero3: Conv2d::new(s, "zero3", a3, w3, 1, 1, Init::Zero, r),
        };
        log::info!("adapter: {} parameters", store.num_scalars());
        Self { config, target, store, trained_steps: 0, net }
    }

    pub fn for_denoiser(config: AdapterConfig, denoiser: &Denoiser, seed: u64) -> Self {
        Self::new(config, denoiser.config.widths, seed)
    }

    pub fn embedding_tables(&self) -> [ParamId; 2] {
        self.net.embed.tables()
    }

    pub fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        trainable: bool,
        x_t: Var,
        cond_image: Var,
        t: &[usize],
        cond: &[ConditionSpec],
    ) -> Injections {
        let p = bind(&self.store, trainable);
        let n = &self.net;
        let emb = n.embed.forward(g, &p, t, cond);
        let x = g.concat(&[cond_image, x_t]);
        let x = g.space_to_depth(x);
        let h = n.conv_in.forward(g, &p, x);
        let h = n.enc1.forward(g, &p, h, emb);
        let half = n.zero1.forward(g, &p, h);
        let h = n.down1.forward(g, &p, h);
        let h = n.enc2.forward(g, &p, h, emb);
        let quarter = n.zero2.forward(g, &p, h);
        let h = n.down2.forward(g, &p, h);
        let h = n.enc3.forward(g, &p, h, emb);
        let mid = n.zero3.forward(g, &p, h);
        Injections { half, quarter, mid }
    }
}

/// A denoiser, optionally augmented by an adapter. Without a conditioning
/// image the adapter is bypassed.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub denoiser: &'a Denoiser,
    pub adapter: Option<&'a Adapter>,
}

impl<'a> Scorer<'a> {
    pub fn new(denoiser: &'a Denoiser, adapter: Option<&'a Adapter>) -> Self {
        Self { denoiser, adapter }
    }

    pub fn ensure_trained(&self) -> Result<()> {
        if !self.denoiser.is_trained() {
            return Err(Error::Untrained("denoiser"));
        }
        if let Some(a) = self.adapter {
            if !a.is_trained() {
                return Err(Error::Untrained("adapter"));
            }
        }
        Ok(())
    }

    /// Record the combined forward pass; the denoiser is always frozen.
    pub fn forward(
        &self,
        g: &mut Graph,
        train_adapter: bool,
        x_t: Var,
        t: &[usize],
        cond: &[ConditionSpec],
        cond_image: Option<Var>,
    ) -> Var {
        let inj = match (self.adapter, cond_image) {
            (Some(a), Some(ci)) => Some(a.forward(g, train_adapter, x_t, ci, t, cond)),
            _ => None,
        };
        self.denoiser.forward(g, false, x_t, t, cond, inj.as_ref()).eps
    }
}

impl NoisePredictor for Scorer<'_> {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], cond: &[ConditionSpec], cond_image: Option<&Tensor>) -> Tensor {
        check_image_dims(x_t);
        let mut g = Graph::inference();
        let xv = g.constant(x_t.clone());
        let ci = cond_image.map(|c| {
            assert_eq!(c.shape(), x_t.shape(), "conditioning image shape mismatch");
            g.constant(c.clone())
        });
        let eps = self.forward(&mut g, false, xv, t, cond, ci);
        g.value(eps).clone()
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], cond: &[ConditionSpec], _cond_image: Option<&Tensor>) -> Tensor {
        Scorer::new(self, None).predict_noise(x_t, t, cond, None)
    }
}
