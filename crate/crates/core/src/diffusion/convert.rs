//! Conversions between f64 interleaved images and f32 `[c, b, h, w]` tensors.

use layerlight_nn::{Shape, Tensor};

use crate::error::{Error, Result};
use crate::image::{LinearImage, LuminosityLayer};

pub fn image_to_tensor(img: &LinearImage) -> Tensor {
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let mut out = vec![0.0f32; 3 * n];
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = px[c] as f32;
        }
    }
    Tensor::from_vec(Shape::new(3, 1, h, w), out)
}

pub fn batch_to_tensor(items: &[&LinearImage]) -> Tensor {
    let ts: Vec<Tensor> = items.iter().map(|i| image_to_tensor(i)).collect();
    Tensor::stack(&ts.iter().collect::<Vec<_>>())
}

/// Interleaved RGB values of batch element `b` of a 3-channel tensor.
pub fn tensor_values(t: &Tensor, b: usize) -> Vec<f64> {
    let s = t.shape();
    assert_eq!(s.c, 3, "expected an RGB tensor");
    let n = s.plane();
    let mut out = vec![0.0; 3 * n];
    for c in 0..3 {
        for (i, &v) in t.plane(c, b).iter().enumerate() {
            out[3 * i + c] = f64::from(v);
        }
    }
    out
}

/// Batch element `b` as an image; values are clamped into `[0, 1]`.
pub fn tensor_to_image(t: &Tensor, b: usize) -> Result<LinearImage> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {}", s.c)));
    }
    let v = tensor_values(t, b);
    LinearImage::new(s.w, s.h, v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect())
}

pub fn plane_to_layer(t: &Tensor, b: usize) -> Result<LuminosityLayer> {
    let s = t.shape();
    LuminosityLayer::new(s.w, s.h, t.plane(0, b).iter().map(|&v| f64::from(v)).collect())
}

pub fn values_to_tensor(values: &[f64], width: usize, height: usize) -> Tensor {
    let n = width * height;
    assert_eq!(values.len(), 3 * n);
    let mut out = vec![0.0f32; 3 * n];
    for (i, px) in values.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = px[c] as f32;
        }
    }
    Tensor::from_vec(Shape::new(3, 1, height, width), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = LinearImage::from_fn(3, 2, |x, y| [x as f64 / 4.0, y as f64 / 2.0, 0.25]).unwrap();
        let t = image_to_tensor(&img);
        assert_eq!(t.shape(), Shape::new(3, 1, 2, 3));
        assert_eq!(t.data()[t.index(0, 0, 1, 2)], 0.5);
        assert_eq!(tensor_to_image(&t, 0).unwrap(), img);
        let b = batch_to_tensor(&[&img, &img]);
        assert_eq!(tensor_values(&b, 1), img.data());
    }
}
