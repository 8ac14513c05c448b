//! Layer composition. These two functions are the only way an edit reaches
//! the output image: relighting can scale a pixel's luminosity and nothing
//! else, colourisation can only blend an overlay where alpha is non-zero.

use crate::error::{Error, Result};
use crate::image::{ensure_same_size, LinearImage, LuminosityLayer, RgbaLayer, LAYER_MAX, LAYER_MIN};

/// `clamp(base * shade / light, 0, 1)` per pixel and channel. The product is
/// taken before the division and the clamp is applied last.
pub fn compose_relight(base: &LinearImage, shade: &LuminosityLayer, light: &LuminosityLayer) -> Result<LinearImage> {
    ensure_same_size(base, shade, "relight shade layer")?;
    ensure_same_size(base, light, "relight light layer")?;
    for (name, layer) in [("shade", shade), ("light", light)] {
        if let Some(v) = layer.data().iter().find(|v| !(**v >= LAYER_MIN && **v <= LAYER_MAX)) {
            return Err(Error::Validation(format!("{name} layer value {v} outside [{LAYER_MIN}, {LAYER_MAX}]")));
        }
    }
    let s = shade.data();
    let l = light.data();
    let data = base
        .data()
        .chunks_exact(3)
        .enumerate()
        .flat_map(|(p, rgb)| rgb.iter().map(move |&c| (c * s[p] / l[p]).clamp(0.0, 1.0)).collect::<Vec<_>>())
        .collect();
    LinearImage::new(base.width(), base.height(), data)
}

/// `alpha * rgb + (1 - alpha) * base` per pixel and channel.
pub fn compose_alpha(base: &LinearImage, overlay: &RgbaLayer) -> Result<LinearImage> {
    ensure_same_size(base, overlay, "alpha overlay")?;
    let a = overlay.alpha();
    let rgb = overlay.rgb();
    let data = base
        .data()
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let alpha = a[i / 3];
            (alpha * rgb[i] + (1.0 - alpha) * b).clamp(0.0, 1.0)
        })
        .collect();
    LinearImage::new(base.width(), base.height(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn px(rgb: [f64; 3]) -> LinearImage {
        LinearImage::new(1, 1, rgb.to_vec()).unwrap()
    }

    fn layer(v: f64) -> LuminosityLayer {
        LuminosityLayer::filled(1, 1, v).unwrap()
    }

    fn close(img: &LinearImage, expect: [f64; 3]) {
        for (a, b) in img.data().iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_layers_are_bit_exact() {
        let base = LinearImage::new(2, 1, vec![0.123, 0.456, 0.789, 0.0, 1.0, 0.333]).unwrap();
        let one = LuminosityLayer::filled(2, 1, 1.0).unwrap();
        assert_eq!(compose_relight(&base, &one, &one).unwrap(), base);
    }

    #[test]
    fn multiply_divide_and_clamp() {
        close(&compose_relight(&px([0.8, 0.4, 0.2]), &layer(0.5), &layer(1.0)).unwrap(), [0.4, 0.2, 0.1]);
        close(&compose_relight(&px([0.3, 0.3, 0.3]), &layer(1.0), &layer(0.5)).unwrap(), [0.6, 0.6, 0.6]);
        close(&compose_relight(&px([0.9, 0.1, 0.1]), &layer(1.0), &layer(0.5)).unwrap(), [1.0, 0.2, 0.2]);
    }

    #[test]
    fn relight_errors() {
        let base = px([0.5; 3]);
        let wide = LuminosityLayer::filled(2, 1, 1.0).unwrap();
        assert!(matches!(compose_relight(&base, &wide, &layer(1.0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn alpha_identities_and_midpoint() {
        let base = LinearImage::new(2, 1, vec![0.2, 0.7, 0.1, 0.9, 0.3, 0.5]).unwrap();
        let rgb = vec![0.8, 0.1, 0.6, 0.4, 0.4, 0.0];
        let clear = RgbaLayer::new(2, 1, rgb.clone(), vec![0.0; 2]).unwrap();
        assert_eq!(compose_alpha(&base, &clear).unwrap(), base);
        let opaque = RgbaLayer::new(2, 1, rgb.clone(), vec![1.0; 2]).unwrap();
        assert_eq!(compose_alpha(&base, &opaque).unwrap().data(), rgb.as_slice());

        let half = RgbaLayer::new(1, 1, vec![0.8; 3], vec![0.5]).unwrap();
        close(&compose_alpha(&px([0.2; 3]), &half).unwrap(), [0.5; 3]);
    }
}
