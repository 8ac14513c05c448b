//! Layer generator: a small convolutional encoder with one decoder branch
//! per output layer group.

use layerlight_nn::{Bind, Conv2d, Graph, Init, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::image::{LAYER_MAX, LAYER_MIN};
use crate::seed;

/// Initial alpha logit of the colorization head; sigmoid(-3) is about 0.047.
pub const ALPHA_BIAS_INIT: f32 = -3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorHead {
    /// Two one-channel branches: shade and light, each in `[0.1, 1]`.
    Relight,
    /// One four-channel branch: RGB and alpha, each in `[0, 1]`.
    Colorize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub widths: [usize; 4],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { widths: [16, 32, 64, 128] }
    }
}

struct EncBlock {
    a: Conv2d,
    b: Conv2d,
}

struct Branch {
    /// Per decoder level, coarse to fine: 1x1 projection and 3x3 refinement.
    levels: Vec<(Conv2d, Conv2d)>,
    out: Conv2d,
}

pub struct Generator {
    pub config: GeneratorConfig,
    pub head: GeneratorHead,
    pub store: ParamStore,
    enc: Vec<EncBlock>,
    branches: Vec<Branch>,
}

pub struct GeneratorOutput {
    /// `Relight`: `[shade, light]`, each `[1, b, h, w]`.
    /// `Colorize`: `[rgb, alpha]`, `[3, b, h, w]` and `[1, b, h, w]`.
    pub layers: Vec<Var>,
}

/// Group norm (groups of four channels, at most eight groups), then silu.
fn norm_silu(g: &mut Graph, h: Var) -> Var {
    let c = g.shape(h).c;
    let h = g.group_norm(h, (c / 4).clamp(1, 8));
    g.silu(h)
}

impl Generator {
    pub fn new(config: GeneratorConfig, head: GeneratorHead, seed: u64) -> Self {
        let mut rng = seed::derived_rng(seed, &[0x6E4_E2A7]);
        let mut store = ParamStore::new();
        let w = config.widths;
        let mut enc = Vec::new();
        let mut cin = 3;
        for (i, &c) in w.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            enc.push(EncBlock {
                a: Conv2d::new(&mut store, &format!("enc{i}.a"), cin, c, 3, stride, Init::He, &mut rng),
                b: Conv2d::new(&mut store, &format!("enc{i}.b"), c, c, 3, 1, Init::He, &mut rng),
            });
            cin = c;
        }
        let (names, outs): (&[&str], usize) = match head {
            GeneratorHead::Relight => (&["shade", "light"], 1),
            GeneratorHead::Colorize => (&["rgba"], 4),
        };
        let branches = names
            .iter()
            .map(|name| {
                let levels = (0..3)
                    .rev()
                    .map(|i| {
                        (
                            Conv2d::new(&mut store, &format!("{name}.proj{i}"), w[i + 1], w[i], 1, 1, Init::He, &mut rng),
                            Conv2d::new(&mut store, &format!("{name}.refine{i}"), w[i], w[i], 3, 1, Init::He, &mut rng),
                        )
                    })
                    .collect();
                let out = Conv2d::new(&mut store, &format!("{name}.out"), w[0], outs, 3, 1, Init::Zero, &mut rng);
                Branch { levels, out }
            })
            .collect::<Vec<_>>();
        if head == GeneratorHead::Colorize {
            store.get_mut(branches[0].out.bias).data_mut()[3] = ALPHA_BIAS_INIT;
        }
        Self { config, head, store, enc, branches }
    }

    pub fn forward(&self, g: &mut Graph, base: Var) -> GeneratorOutput {
        let p = Bind::trainable(&self.store);
        let mut skips = Vec::new();
        let mut h = base;
        for blk in &self.enc {
            h = blk.a.forward(g, &p, h);
            h = norm_silu(g, h);
            h = blk.b.forward(g, &p, h);
            h = norm_silu(g, h);
            skips.push(h);
        }
        let mut heads = Vec::new();
        for br in &self.branches {
            let mut h = skips[3];
            for (k, (proj, refine)) in br.levels.iter().enumerate() {
                let skip = skips[2 - k];
                h = proj.forward(g, &p, h);
                h = g.upsample2(h);
                h = g.add(h, skip);
                h = refine.forward(g, &p, h);
                h = norm_silu(g, h);
            }
            heads.push(br.out.forward(g, &p, h));
        }
        let layers = match self.head {
            GeneratorHead::Relight => heads
                .into_iter()
                .map(|h| {
                    let s = g.sigmoid(h);
                    g.clamp_inward(s, LAYER_MIN as f32, LAYER_MAX as f32)
                })
                .collect(),
            GeneratorHead::Colorize => {
                let s = g.sigmoid(heads[0]);
                vec![g.slice_channels(s, 0, 3), g.slice_channels(s, 3, 1)]
            }
        };
        GeneratorOutput { layers }
    }
}
