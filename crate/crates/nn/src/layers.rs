//! Parameterised building blocks recorded onto a [`Graph`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{he_normal, normal, ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

/// How a model's parameters are bound into a graph.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Bind<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, trainable: false }
    }

    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(self.store, id, self.trainable)
    }
}

/// Weight initialisation scheme for a freshly created layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    He,
    /// Normal with the given standard deviation.
    Normal(f32),
    /// All weights and biases zero.
    Zero,
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let shape = Shape::new(cout, 1, 1, fan_in);
        let w = match init {
            Init::He => he_normal(shape, fan_in, rng),
            Init::Normal(std) => normal(shape, std, rng),
            Init::Zero => Tensor::zeros(shape),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(Shape::vector(cout)));
        Self { weight, bias, cin, cout, k, stride }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bind<'_>, x: Var) -> Var {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        g.conv2d(x, w, Some(b), self.k, self.stride)
    }
}

/// Fully connected layer acting on `[in, b, 1, 1]` columns.
#[derive(Clone, Copy, Debug)]
pub struct Linear(pub Conv2d);

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, init: Init, rng: &mut impl Rng) -> Self {
        Self(Conv2d::new(store, name, fan_in, fan_out, 1, 1, init, rng))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bind<'_>, x: Var) -> Var {
        self.0.forward(g, p, x)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub num: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, num: usize, dim: usize, std: f32, rng: &mut impl Rng) -> Self {
        let table = store.add(format!("{name}.table"), normal(Shape::new(num, 1, 1, dim), std, rng));
        Self { table, num, dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bind<'_>, idx: &[usize]) -> Var {
        let t = p.var(g, self.table);
        g.gather(t, idx)
    }
}

/// Sinusoidal features of a scalar per batch element, `[dim, b, 1, 1]`.
pub fn sinusoidal_features(values: &[f32], dim: usize) -> Tensor {
    assert!(dim % 2 == 0, "sinusoidal dim must be even");
    let half = dim / 2;
    let b = values.len();
    let mut out = vec![0.0f32; dim * b];
    for (j, &v) in values.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f32.ln()) * i as f32 / half as f32).exp();
            let a = v * freq;
            out[i * b + j] = a.sin();
            out[(half + i) * b + j] = a.cos();
        }
    }
    Tensor::from_vec(Shape::new(dim, b, 1, 1), out)
}
