//! Minimal dense autodiff for small convolutional networks on the CPU.
//!
//! Activations are `[c, b, h, w]` feature maps ([`Tensor`]). Models register
//! named weights in a [`ParamStore`] and record their forward pass onto a
//! [`Graph`], which provides reverse-mode gradients. With the `parallel`
//! feature (on by default) large element-wise kernels and im2col run on the
//! rayon pool; results are bit-identical either way.

pub mod gemm;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod par;
pub mod params;
pub mod tensor;

pub use graph::{Grads, Graph, Var};
pub use layers::{sinusoidal_features, Bind, Conv2d, Embedding, Init, Linear};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::{Shape, Tensor};
