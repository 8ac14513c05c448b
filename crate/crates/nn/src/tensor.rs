//! Dense `f32` feature maps in channel-major `[c, b, h, w]` layout.
//!
//! Keeping channels outermost lets a convolution write its GEMM output
//! straight into the next activation without a transpose.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, b: usize, h: usize, w: usize) -> Self {
        Self { c, b, h, w }
    }

    /// A `[n, 1, 1, 1]` column, used for biases and scalars.
    pub const fn vector(n: usize) -> Self {
        Self::new(n, 1, 1, 1)
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.c * self.b * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Number of columns when viewed as a `[c, b*h*w]` matrix.
    pub const fn cols(&self) -> usize {
        self.b * self.h * self.w
    }

    pub const fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.c, self.b, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Self {
        assert_eq!(shape.len(), data.len(), "tensor data does not match shape {shape}");
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Reinterpret the buffer with a new shape of equal size.
    pub fn reshape(mut self, shape: Shape) -> Self {
        assert_eq!(shape.len(), self.data.len(), "cannot reshape {} to {shape}", self.shape);
        self.shape = shape;
        self
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor {}", self.shape);
        self.data[0]
    }

    #[inline]
    pub fn index(&self, c: usize, b: usize, y: usize, x: usize) -> usize {
        ((c * self.shape.b + b) * self.shape.h + y) * self.shape.w + x
    }

    /// The `h*w` plane of channel `c` for batch element `b`.
    pub fn plane(&self, c: usize, b: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (c * self.shape.b + b) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, c: usize, b: usize) -> &mut [f32] {
        let p = self.shape.plane();
        let start = (c * self.shape.b + b) * p;
        &mut self.data[start..start + p]
    }

    /// Extract batch element `b` as a `[c, 1, h, w]` tensor.
    pub fn batch_item(&self, b: usize) -> Tensor {
        let s = self.shape;
        assert!(b < s.b, "batch index {b} out of range for {s}");
        let mut out = Tensor::zeros(Shape::new(s.c, 1, s.h, s.w));
        for c in 0..s.c {
            out.plane_mut(c, 0).copy_from_slice(self.plane(c, b));
        }
        out
    }

    /// Stack `[c, 1, h, w]` items (or wider batches) along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Tensor {
        assert!(!items.is_empty(), "stack of zero tensors");
        let first = items[0].shape;
        let total_b: usize = items.iter().map(|t| t.shape.b).sum();
        for t in items {
            assert!(
                t.shape.c == first.c && t.shape.h == first.h && t.shape.w == first.w,
                "stack shape mismatch: {} vs {}",
                t.shape,
                first
            );
        }
        let mut out = Tensor::zeros(Shape::new(first.c, total_b, first.h, first.w));
        let mut b0 = 0;
        for t in items {
            for b in 0..t.shape.b {
                for c in 0..first.c {
                    out.plane_mut(c, b0 + b).copy_from_slice(t.plane(c, b));
                }
            }
            b0 += t.shape.b;
        }
        out
    }

    /// Concatenate `times` copies along the batch axis.
    pub fn repeat_batch(&self, times: usize) -> Tensor {
        let items: Vec<&Tensor> = std::iter::repeat_n(self, times).collect();
        Tensor::stack(&items)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, k: f32) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
