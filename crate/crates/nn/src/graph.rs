//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are
//! computed eagerly; [`Graph::backward`] then walks the tape in reverse.
//! Parameters enter the tape through [`Graph::param`]; only parameters bound
//! as trainable ever receive a gradient buffer, and frozen weights skip the
//! weight-gradient GEMM entirely.

use std::collections::HashMap;

use crate::gemm::{gemm, MatRef};
use crate::par;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, k: usize, stride: usize, cols: Option<Vec<f32>> },
    Add(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    ScaleShift(Var, Var, Var),
    Scale(Var, f32),
    Silu(Var),
    Sigmoid(Var),
    Clamp(Var, f32, f32),
    ClampInward(Var, f32, f32),
    GroupNorm { x: Var, groups: usize, rstd: Vec<f32> },
    Upsample2(Var),
    SpaceToDepth(Var),
    DepthToSpace(Var),
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    Gather { table: Var, idx: Vec<usize> },
    Relight { base: Tensor, shade: Var, light: Var },
    AlphaOver { base: Tensor, rgb: Var, alpha: Var },
    MseTarget { x: Var, target: Tensor },
    L1FromOne(Var),
    EdgeMagnitude(Var),
    WeightedSum(Vec<(Var, f32)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-parameter gradients of one [`ParamStore`], indexed like the store.
#[derive(Clone, Debug)]
pub struct Grads {
    store_id: u64,
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn empty(store: &ParamStore) -> Self {
        Self { store_id: store.id(), grads: vec![None; store.len()] }
    }

    pub fn store_id(&self) -> u64 {
        self.store_id
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.index()].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Number of parameters that received a gradient.
    pub fn populated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f32) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(k);
        }
    }

    /// Rescale so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale((max_norm / norm) as f32);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    grad_enabled: bool,
    bound: HashMap<(u64, usize), Var>,
    trainable: Vec<(u64, ParamId, Var)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    /// A graph that records gradients.
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A forward-only graph: nothing requires a gradient and no backward
    /// caches are kept.
    pub fn inference() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), grad_enabled, bound: HashMap::new(), trainable: Vec::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that collects a gradient (for example an image being optimised
    /// directly, or a finite-difference probe).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind parameter `id` of `store`. Binding the same parameter twice in a
    /// graph returns the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        let key = (store.id(), id.index());
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let train = trainable && self.grad_enabled;
        let v = self.push(store.get(id).clone(), Op::Leaf, train);
        if train {
            self.trainable.push((store.id(), id, v));
        }
        self.bound.insert(key, v);
        v
    }

    // ---- operations -------------------------------------------------------

    /// 2-D convolution with zero padding `k / 2`. `w` is `[cout, 1, 1, cin*k*k]`
    /// and `b` is `[cout, 1, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, k: usize, stride: usize) -> Var {
        assert!(k % 2 == 1, "odd kernels only");
        assert!(stride >= 1);
        let xs = self.shape(x);
        let ws = self.shape(w);
        let kk = xs.c * k * k;
        assert_eq!(ws.w * ws.h * ws.b, kk, "conv weight {ws} does not fit input {xs} with k={k}");
        let cout = ws.c;
        let ho = (xs.h - 1) / stride + 1;
        let wo = (xs.w - 1) / stride + 1;
        let out_shape = Shape::new(cout, xs.b, ho, wo);
        let n = out_shape.cols();
        let direct = k == 1 && stride == 1;
        let cols = if direct { None } else { Some(im2col(self.value(x), k, stride, ho, wo)) };
        let mut out = vec![0.0f32; cout * n];
        {
            let col_data: &[f32] = cols.as_deref().unwrap_or_else(|| self.value(x).data());
            gemm(MatRef::new(self.value(w).data(), cout, kk), MatRef::new(col_data, kk, n), &mut out, 0.0);
        }
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            assert_eq!(bias.len(), cout, "conv bias length");
            par::for_each_chunk_mut(&mut out, n, |co, row| {
                let bv = bias[co];
                row.iter_mut().for_each(|v| *v += bv);
            });
        }
        let w_rg = self.requires_grad(w);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let rg = self.rg(&inputs);
        let keep = if rg && w_rg { cols } else { None };
        self.push(
            Tensor::from_vec(out_shape, out),
            Op::Conv2d { x, w, b, k, stride, cols: keep },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
            ta.zip_map(tb, |x, y| x + y)
        };
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
            ta.zip_map(tb, |x, y| x * y)
        };
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `x + y` where `y` is `[c, 1, 1, 1]` (shared) or `[c, b, 1, 1]`
    /// (per batch element), broadcast over the spatial plane.
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Var {
        let xs = self.shape(x);
        let ys = self.shape(y);
        assert!(ys.c == xs.c && ys.h == 1 && ys.w == 1 && (ys.b == 1 || ys.b == xs.b), "add_bcast {ys} onto {xs}");
        let mut out = self.value(x).clone();
        let yv = self.value(y).data().to_vec();
        let plane = xs.plane();
        par::for_each_chunk_mut(out.data_mut(), plane, |i, chunk| {
            let (c, b) = (i / xs.b, i % xs.b);
            let add = if ys.b == 1 { yv[c] } else { yv[c * ys.b + b] };
            chunk.iter_mut().for_each(|v| *v += add);
        });
        let rg = self.rg(&[x, y]);
        self.push(out, Op::AddBcast(x, y), rg)
    }

    /// `x * (1 + scale) + shift` with per-channel (optionally per-batch)
    /// `scale` and `shift` of shape `[c, 1|b, 1, 1]`.
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xs = self.shape(x);
        for y in [scale, shift] {
            let ys = self.shape(y);
            assert!(ys.c == xs.c && ys.h == 1 && ys.w == 1 && (ys.b == 1 || ys.b == xs.b), "scale_shift {ys} onto {xs}");
        }
        let bcast_b = self.shape(scale).b;
        assert_eq!(bcast_b, self.shape(shift).b, "scale and shift batch mismatch");
        let mut out = self.value(x).clone();
        let sv = self.value(scale).data().to_vec();
        let tv = self.value(shift).data().to_vec();
        par::for_each_chunk_mut(out.data_mut(), xs.plane(), |i, chunk| {
            let (c, b) = (i / xs.b, i % xs.b);
            let j = if bcast_b == 1 { c } else { c * bcast_b + b };
            let (m, a) = (1.0 + sv[j], tv[j]);
            chunk.iter_mut().for_each(|v| *v = *v * m + a);
        });
        let rg = self.rg(&[x, scale, shift]);
        self.push(out, Op::ScaleShift(x, scale, shift), rg)
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, k), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Clamp into `[lo, hi]`. The gradient passes wherever `lo <= x <= hi`.
    /// Group normalization without affine parameters: each batch element's
    /// channels are split into `groups` and normalized to zero mean, unit
    /// variance over (channels in group, h, w).
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-5;
        let xs = self.shape(x);
        assert!(groups > 0 && xs.c % groups == 0, "{} channels do not split into {groups} groups", xs.c);
        let per = xs.c / groups;
        let mut out = self.value(x).clone();
        let mut rstd = vec![0.0f32; groups * xs.b];
        for b in 0..xs.b {
            for gi in 0..groups {
                let chans = gi * per..(gi + 1) * per;
                let n = (per * xs.plane()) as f64;
                let mut sum = 0.0f64;
                let mut sq = 0.0f64;
                for c in chans.clone() {
                    for &v in out.plane(c, b) {
                        sum += f64::from(v);
                        sq += f64::from(v) * f64::from(v);
                    }
                }
                let mean = sum / n;
                let var = (sq / n - mean * mean).max(0.0);
                let r = 1.0 / (var + EPS).sqrt();
                rstd[b * groups + gi] = r as f32;
                for c in chans {
                    for v in out.plane_mut(c, b) {
                        *v = ((f64::from(*v) - mean) * r) as f32;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::GroupNorm { x, groups, rstd }, rg)
    }

    /// Clamp into `[lo, hi]`. Outside the range the gradient still passes
    /// when a descent step would move the input back inside, so clipped
    /// values are not stuck for good.
    pub fn clamp_inward(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(out, Op::ClampInward(x, lo, hi), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(out, Op::Clamp(x, lo, hi), rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let os = Shape::new(s.c, s.b, s.h * 2, s.w * 2);
        let src = self.value(x);
        let mut out = Tensor::zeros(os);
        let (ow, iw, ip) = (os.w, s.w, s.plane());
        par::for_each_chunk_mut(out.data_mut(), os.plane(), |i, dst| {
            let plane = &src.data()[i * ip..(i + 1) * ip];
            for (y, row) in dst.chunks_mut(ow).enumerate() {
                let srow = &plane[(y / 2) * iw..(y / 2 + 1) * iw];
                for (x, v) in row.iter_mut().enumerate() {
                    *v = srow[x / 2];
                }
            }
        });
        let rg = self.rg(&[x]);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// `[c, b, h, w] -> [4c, b, h/2, w/2]`, channel `4c + 2dy + dx`.
    pub fn space_to_depth(&mut self, x: Var) -> Var {
        let out = space_to_depth(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::SpaceToDepth(x), rg)
    }

    /// Inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var) -> Var {
        let out = depth_to_space(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::DepthToSpace(x), rg)
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let first = self.shape(xs[0]);
        let mut data = Vec::new();
        let mut c = 0;
        for &v in xs {
            let s = self.shape(v);
            assert!(s.b == first.b && s.h == first.h && s.w == first.w, "concat shape mismatch {s} vs {first}");
            data.extend_from_slice(self.value(v).data());
            c += s.c;
        }
        let rg = self.rg(xs);
        self.push(Tensor::from_vec(first.with_c(c), data), Op::Concat(xs.to_vec()), rg)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x);
        assert!(start + len <= s.c, "channel slice out of range");
        let per = s.cols();
        let data = self.value(x).data()[start * per..(start + len) * per].to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(s.with_c(len), data), Op::SliceChannels { x, start }, rg)
    }

    /// Look up rows of a `[n, 1, 1, dim]` table; returns `[dim, idx.len(), 1, 1]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let ts = self.shape(table);
        let (n, dim) = (ts.c, ts.w);
        let t = self.value(table).data();
        let bsz = idx.len();
        let mut out = vec![0.0; dim * bsz];
        for (j, &i) in idx.iter().enumerate() {
            assert!(i < n, "embedding index {i} out of range {n}");
            for d in 0..dim {
                out[d * bsz + j] = t[i * dim + d];
            }
        }
        let rg = self.rg(&[table]);
        self.push(Tensor::from_vec(Shape::new(dim, bsz, 1, 1), out), Op::Gather { table, idx: idx.to_vec() }, rg)
    }

    /// Luminosity composition `clamp(base * shade / light, 0, 1)`, with
    /// `base` a constant `[3, b, h, w]` image and both layers `[1, b, h, w]`.
    pub fn relight(&mut self, base: &Tensor, shade: Var, light: Var) -> Var {
        let bs = base.shape();
        let ss = self.shape(shade);
        assert_eq!(ss, self.shape(light), "shade/light shape mismatch");
        assert!(ss.c == 1 && ss.b == bs.b && ss.h == bs.h && ss.w == bs.w, "layer {ss} does not fit base {bs}");
        let n = ss.cols();
        let s = self.value(shade).data();
        let l = self.value(light).data();
        let mut out = base.clone();
        for c in 0..bs.c {
            let row = &mut out.data_mut()[c * n..(c + 1) * n];
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v * s[i] / l[i]).clamp(0.0, 1.0);
            }
        }
        let rg = self.rg(&[shade, light]);
        self.push(out, Op::Relight { base: base.clone(), shade, light }, rg)
    }

    /// Alpha-over composition `alpha * rgb + (1 - alpha) * base`.
    pub fn alpha_over(&mut self, base: &Tensor, rgb: Var, alpha: Var) -> Var {
        let bs = base.shape();
        assert_eq!(self.shape(rgb), bs, "overlay rgb does not fit base");
        assert_eq!(self.shape(alpha), bs.with_c(1), "alpha does not fit base");
        let n = bs.cols();
        let a = self.value(alpha).data();
        let r = self.value(rgb).data();
        let mut out = base.clone();
        for c in 0..bs.c {
            let row = &mut out.data_mut()[c * n..(c + 1) * n];
            for (i, v) in row.iter_mut().enumerate() {
                *v = a[i] * r[c * n + i] + (1.0 - a[i]) * *v;
            }
        }
        let rg = self.rg(&[rgb, alpha]);
        self.push(out, Op::AlphaOver { base: base.clone(), rgb, alpha }, rg)
    }

    /// Mean squared error against a constant target. Scalar output.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse shape mismatch");
        let n = xv.len().max(1) as f64;
        let s: f64 = xv.data().iter().zip(target.data()).map(|(&a, &b)| f64::from(a - b).powi(2)).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar((s / n) as f32), Op::MseTarget { x, target: target.clone() }, rg)
    }

    /// Mean of `|1 - x|`. Scalar output.
    pub fn l1_from_one(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len().max(1) as f64;
        let s: f64 = xv.data().iter().map(|&v| f64::from(1.0 - v).abs()).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar((s / n) as f32), Op::L1FromOne(x), rg)
    }

    /// `[2, b, h, w] -> [1, b, h, w]`, `sqrt(gx^2 + gy^2 + EDGE_EPS)`.
    pub fn edge_magnitude(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.c, 2, "edge_magnitude expects two gradient channels");
        let n = s.cols();
        let v = self.value(x).data();
        let out: Vec<f32> = (0..n).map(|i| (v[i] * v[i] + v[n + i] * v[n + i] + EDGE_EPS).sqrt()).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(s.with_c(1), out), Op::EdgeMagnitude(x), rg)
    }

    /// `sum_i w_i * x_i` over scalar variables.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let mut s = 0.0f32;
        for &(v, w) in terms {
            s += w * self.value(v).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), rg)
    }

    // ---- backward ---------------------------------------------------------

    /// Backpropagate from `root`, seeding its gradient with ones.
    pub fn backward(&mut self, root: Var) {
        let seed = Tensor::full(self.shape(root), 1.0);
        self.backward_with(vec![(root, seed)]);
    }

    /// Backpropagate explicit upstream gradients. Used to inject a gradient
    /// that does not come from differentiating a recorded loss.
    pub fn backward_with(&mut self, seeds: Vec<(Var, Tensor)>) {
        assert!(self.grad_enabled, "backward on an inference graph");
        self.grads = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(v), g.shape(), "seed gradient shape mismatch");
            top = top.max(v.0 + 1);
            accumulate(&mut self.grads, v, g);
        }
        for i in (0..top).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            backprop_node(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Collect the gradients of every trainable parameter of `store`.
    pub fn param_grads(&self, store: &ParamStore) -> Grads {
        let mut out = Grads::empty(store);
        for &(sid, pid, v) in &self.trainable {
            if sid == store.id() {
                if let Some(g) = self.grad(v) {
                    out.grads[pid.index()] = Some(g.clone());
                }
            }
        }
        out
    }

    /// Number of trainable parameter bindings across all stores.
    pub fn num_trainable_bindings(&self) -> usize {
        self.trainable.len()
    }
}

pub const EDGE_EPS: f32 = 1e-6;

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Tensor>], i: usize, g: &Tensor) {
    let rg = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, k, stride, cols } => {
            let xs = val(*x).shape();
            let ws = val(*w).shape();
            let cout = ws.c;
            let kk = xs.c * k * k;
            let n = g.shape().cols();
            if rg(*w) {
                let col: &[f32] = match cols {
                    Some(c) => c,
                    None => val(*x).data(),
                };
                let mut dw = vec![0.0; cout * kk];
                gemm(MatRef::new(g.data(), cout, n), MatRef::new(col, kk, n).t(), &mut dw, 0.0);
                accumulate(grads, *w, Tensor::from_vec(ws, dw));
            }
            if let Some(b) = b {
                if rg(*b) {
                    let db: Vec<f32> =
                        g.data().chunks(n).map(|row| row.iter().map(|&v| f64::from(v)).sum::<f64>() as f32).collect();
                    accumulate(grads, *b, Tensor::from_vec(val(*b).shape(), db));
                }
            }
            if rg(*x) {
                let mut dcol = vec![0.0; kk * n];
                gemm(MatRef::new(val(*w).data(), cout, kk).t(), MatRef::new(g.data(), cout, n), &mut dcol, 0.0);
                let dx = if *k == 1 && *stride == 1 {
                    Tensor::from_vec(xs, dcol)
                } else {
                    col2im(&dcol, xs, *k, *stride, g.shape().h, g.shape().w)
                };
                accumulate(grads, *x, dx);
            }
        }
        Op::Add(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, g.clone());
            }
            if rg(*b) {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, g.zip_map(val(*b), |g, y| g * y));
            }
            if rg(*b) {
                accumulate(grads, *b, g.zip_map(val(*a), |g, x| g * x));
            }
        }
        Op::AddBcast(x, y) => {
            if rg(*x) {
                accumulate(grads, *x, g.clone());
            }
            if rg(*y) {
                let ys = val(*y).shape();
                let gs = g.shape();
                let mut dy = vec![0.0f32; ys.len()];
                for c in 0..gs.c {
                    for b in 0..gs.b {
                        let s: f64 = g.plane(c, b).iter().map(|&v| f64::from(v)).sum();
                        let j = if ys.b == 1 { c } else { c * ys.b + b };
                        dy[j] += s as f32;
                    }
                }
                accumulate(grads, *y, Tensor::from_vec(ys, dy));
            }
        }
        Op::ScaleShift(x, sc, sh) => {
            let ys = val(*sc).shape();
            let gs = g.shape();
            let j = |c: usize, b: usize| if ys.b == 1 { c } else { c * ys.b + b };
            if rg(*x) {
                let sv = val(*sc).data();
                let mut dx = g.clone();
                for c in 0..gs.c {
                    for b in 0..gs.b {
                        let m = 1.0 + sv[j(c, b)];
                        dx.plane_mut(c, b).iter_mut().for_each(|v| *v *= m);
                    }
                }
                accumulate(grads, *x, dx);
            }
            if rg(*sc) {
                let xv = val(*x);
                let mut ds = vec![0.0f32; ys.len()];
                for c in 0..gs.c {
                    for b in 0..gs.b {
                        let s: f64 = g.plane(c, b).iter().zip(xv.plane(c, b)).map(|(&g, &x)| f64::from(g) * f64::from(x)).sum();
                        ds[j(c, b)] += s as f32;
                    }
                }
                accumulate(grads, *sc, Tensor::from_vec(ys, ds));
            }
            if rg(*sh) {
                let mut dt = vec![0.0f32; ys.len()];
                for c in 0..gs.c {
                    for b in 0..gs.b {
                        let s: f64 = g.plane(c, b).iter().map(|&v| f64::from(v)).sum();
                        dt[j(c, b)] += s as f32;
                    }
                }
                accumulate(grads, *sh, Tensor::from_vec(ys, dt));
            }
        }
        Op::Scale(x, k) => {
            if rg(*x) {
                accumulate(grads, *x, g.map(|v| v * k));
            }
        }
        Op::Silu(x) => {
            if rg(*x) {
                let d = g.zip_map(val(*x), |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                });
                accumulate(grads, *x, d);
            }
        }
        Op::Sigmoid(x) => {
            if rg(*x) {
                let d = g.zip_map(&nodes[i].value, |g, y| g * y * (1.0 - y));
                accumulate(grads, *x, d);
            }
        }
        Op::GroupNorm { x, groups, rstd } => {
            if rg(*x) {
                let y = &nodes[i].value;
                let xs = y.shape();
                let per = xs.c / groups;
                let mut dx = g.clone();
                for b in 0..xs.b {
                    for gi in 0..*groups {
                        let chans = gi * per..(gi + 1) * per;
                        let n = (per * xs.plane()) as f64;
                        let (mut mg, mut mgy) = (0.0f64, 0.0f64);
                        for c in chans.clone() {
                            for (&gv, &yv) in g.plane(c, b).iter().zip(y.plane(c, b)) {
                                mg += f64::from(gv);
                                mgy += f64::from(gv) * f64::from(yv);
                            }
                        }
                        mg /= n;
                        mgy /= n;
                        let r = f64::from(rstd[b * groups + gi]);
                        for c in chans {
                            let yp = y.plane(c, b);
                            for (d, &yv) in dx.plane_mut(c, b).iter_mut().zip(yp) {
                                *d = (r * (f64::from(*d) - mg - f64::from(yv) * mgy)) as f32;
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
        Op::ClampInward(x, lo, hi) => {
            if rg(*x) {
                let d = g.zip_map(val(*x), |g, x| if (x < *lo && g > 0.0) || (x > *hi && g < 0.0) { 0.0 } else { g });
                accumulate(grads, *x, d);
            }
        }
        Op::Clamp(x, lo, hi) => {
            if rg(*x) {
                let d = g.zip_map(val(*x), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 });
                accumulate(grads, *x, d);
            }
        }
        Op::Upsample2(x) => {
            if rg(*x) {
                let xs = val(*x).shape();
                let mut dx = Tensor::zeros(xs);
                let (ow, iw) = (g.shape().w, xs.w);
                let gp = g.shape().plane();
                par::for_each_chunk_mut(dx.data_mut(), xs.plane(), |p, dst| {
                    let src = &g.data()[p * gp..(p + 1) * gp];
                    for (y, row) in src.chunks(ow).enumerate() {
                        let drow = &mut dst[(y / 2) * iw..(y / 2 + 1) * iw];
                        for (xx, &v) in row.iter().enumerate() {
                            drow[xx / 2] += v;
                        }
                    }
                });
                accumulate(grads, *x, dx);
            }
        }
        Op::SpaceToDepth(x) => {
            if rg(*x) {
                accumulate(grads, *x, depth_to_space(g));
            }
        }
        Op::DepthToSpace(x) => {
            if rg(*x) {
                accumulate(grads, *x, space_to_depth(g));
            }
        }
        Op::Concat(xs) => {
            let per = g.shape().cols();
            let mut c0 = 0;
            for &v in xs {
                let s = val(v).shape();
                if rg(v) {
                    let data = g.data()[c0 * per..(c0 + s.c) * per].to_vec();
                    accumulate(grads, v, Tensor::from_vec(s, data));
                }
                c0 += s.c;
            }
        }
        Op::SliceChannels { x, start } => {
            if rg(*x) {
                let xs = val(*x).shape();
                let per = xs.cols();
                let mut dx = Tensor::zeros(xs);
                dx.data_mut()[start * per..start * per + g.len()].copy_from_slice(g.data());
                accumulate(grads, *x, dx);
            }
        }
        Op::Gather { table, idx } => {
            if rg(*table) {
                let ts = val(*table).shape();
                let dim = ts.w;
                let bsz = idx.len();
                let mut dt = vec![0.0f32; ts.len()];
                for (j, &row) in idx.iter().enumerate() {
                    for d in 0..dim {
                        dt[row * dim + d] += g.data()[d * bsz + j];
                    }
                }
                accumulate(grads, *table, Tensor::from_vec(ts, dt));
            }
        }
        Op::Relight { base, shade, light } => {
            let s = val(*shade).data();
            let l = val(*light).data();
            let n = s.len();
            let mut ds = vec![0.0f32; n];
            let mut dl = vec![0.0f32; n];
            for c in 0..base.shape().c {
                let brow = &base.data()[c * n..(c + 1) * n];
                let grow = &g.data()[c * n..(c + 1) * n];
                for p in 0..n {
                    let pre = brow[p] * s[p] / l[p];
                    // Clamped pixels pass the gradient only when descent
                    // pulls them back into range.
                    let gp = grow[p];
                    if (0.0..=1.0).contains(&pre) || (pre > 1.0 && gp > 0.0) || (pre < 0.0 && gp < 0.0) {
                        ds[p] += grow[p] * brow[p] / l[p];
                        dl[p] -= grow[p] * pre / l[p];
                    }
                }
            }
            let ls = val(*shade).shape();
            if rg(*shade) {
                accumulate(grads, *shade, Tensor::from_vec(ls, ds));
            }
            if rg(*light) {
                accumulate(grads, *light, Tensor::from_vec(ls, dl));
            }
        }
        Op::AlphaOver { base, rgb, alpha } => {
            let a = val(*alpha).data();
            let r = val(*rgb).data();
            let n = a.len();
            if rg(*rgb) {
                let mut dr = vec![0.0f32; r.len()];
                for c in 0..base.shape().c {
                    for p in 0..n {
                        dr[c * n + p] = g.data()[c * n + p] * a[p];
                    }
                }
                accumulate(grads, *rgb, Tensor::from_vec(val(*rgb).shape(), dr));
            }
            if rg(*alpha) {
                let mut da = vec![0.0f32; n];
                for c in 0..base.shape().c {
                    for p in 0..n {
                        da[p] += g.data()[c * n + p] * (r[c * n + p] - base.data()[c * n + p]);
                    }
                }
                accumulate(grads, *alpha, Tensor::from_vec(val(*alpha).shape(), da));
            }
        }
        Op::MseTarget { x, target } => {
            if rg(*x) {
                let k = 2.0 * g.item() / val(*x).len().max(1) as f32;
                accumulate(grads, *x, val(*x).zip_map(target, |a, b| k * (a - b)));
            }
        }
        Op::L1FromOne(x) => {
            if rg(*x) {
                let k = g.item() / val(*x).len().max(1) as f32;
                let d = val(*x).map(|v| {
                    if v < 1.0 {
                        -k
                    } else if v > 1.0 {
                        k
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *x, d);
            }
        }
        Op::EdgeMagnitude(x) => {
            if rg(*x) {
                let xv = val(*x).data();
                let m = nodes[i].value.data();
                let n = m.len();
                let mut dx = vec![0.0f32; 2 * n];
                for p in 0..n {
                    let gm = g.data()[p] / m[p];
                    dx[p] = gm * xv[p];
                    dx[n + p] = gm * xv[n + p];
                }
                accumulate(grads, *x, Tensor::from_vec(val(*x).shape(), dx));
            }
        }
        Op::WeightedSum(terms) => {
            for &(v, w) in terms {
                if rg(v) {
                    accumulate(grads, v, Tensor::scalar(g.item() * w));
                }
            }
        }
    }
}

fn im2col(x: &Tensor, k: usize, stride: usize, ho: usize, wo: usize) -> Vec<f32> {
    let s = x.shape();
    let pad = (k / 2) as isize;
    let n = s.b * ho * wo;
    let mut col = vec![0.0f32; s.c * k * k * n];
    par::for_each_chunk_mut(&mut col, n, |r, row| {
        let ci = r / (k * k);
        let ky = ((r / k) % k) as isize;
        let kx = (r % k) as isize;
        for b in 0..s.b {
            let plane = x.plane(ci, b);
            for oy in 0..ho {
                let iy = (oy * stride) as isize + ky - pad;
                let dst = &mut row[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                if iy < 0 || iy >= s.h as isize {
                    continue;
                }
                let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                if stride == 1 {
                    let shift = kx - pad;
                    let Some((lo, hi)) = valid_range(shift, s.w, wo) else { continue };
                    dst[lo..hi].copy_from_slice(&src[(lo as isize + shift) as usize..(hi as isize + shift) as usize]);
                    continue;
                }
                for (ox, d) in dst.iter_mut().enumerate() {
                    let ix = (ox * stride) as isize + kx - pad;
                    if ix >= 0 && ix < s.w as isize {
                        *d = src[ix as usize];
                    }
                }
            }
        }
    });
    col
}

/// Output columns `ox` with `0 <= ox + shift < width`, clipped to `[0, wo)`.
/// `None` when no column is in range.
fn valid_range(shift: isize, width: usize, wo: usize) -> Option<(usize, usize)> {
    let lo = (-shift).max(0) as usize;
    let hi = (width as isize - shift).clamp(0, wo as isize) as usize;
    (lo < hi).then_some((lo, hi))
}

fn col2im(dcol: &[f32], xs: Shape, k: usize, stride: usize, ho: usize, wo: usize) -> Tensor {
    let pad = (k / 2) as isize;
    let n = xs.b * ho * wo;
    let mut dx = Tensor::zeros(xs);
    let per_c = xs.b * xs.plane();
    par::for_each_chunk_mut(dx.data_mut(), per_c, |ci, dst| {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &dcol[r * n..(r + 1) * n];
                for b in 0..xs.b {
                    let plane = &mut dst[b * xs.plane()..(b + 1) * xs.plane()];
                    for oy in 0..ho {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        let src = &row[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        let drow = &mut plane[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                        if stride == 1 {
                            let shift = kx as isize - pad;
                            let Some((lo, hi)) = valid_range(shift, xs.w, wo) else { continue };
                            let d = &mut drow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                            for (a, &v) in d.iter_mut().zip(&src[lo..hi]) {
                                *a += v;
                            }
                            continue;
                        }
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < xs.w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

fn space_to_depth(x: &Tensor) -> Tensor {
    let s = x.shape();
    assert!(s.h % 2 == 0 && s.w % 2 == 0, "space_to_depth needs even size, got {s}");
    let os = Shape::new(s.c * 4, s.b, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(os);
    for c in 0..s.c {
        for b in 0..s.b {
            let src = x.plane(c, b);
            for dy in 0..2 {
                for dx in 0..2 {
                    let dst = out.plane_mut(c * 4 + dy * 2 + dx, b);
                    for y in 0..os.h {
                        for xx in 0..os.w {
                            dst[y * os.w + xx] = src[(2 * y + dy) * s.w + 2 * xx + dx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn depth_to_space(x: &Tensor) -> Tensor {
    let s = x.shape();
    assert!(s.c % 4 == 0, "depth_to_space needs a multiple of 4 channels, got {s}");
    let os = Shape::new(s.c / 4, s.b, s.h * 2, s.w * 2);
    let mut out = Tensor::zeros(os);
    for c in 0..os.c {
        for b in 0..s.b {
            for dy in 0..2 {
                for dx in 0..2 {
                    let src = x.plane(c * 4 + dy * 2 + dx, b).to_vec();
                    let dst = out.plane_mut(c, b);
                    for y in 0..s.h {
                        for xx in 0..s.w {
                            dst[(2 * y + dy) * os.w + 2 * xx + dx] = src[y * s.w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}
