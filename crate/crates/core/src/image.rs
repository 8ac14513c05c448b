//! Raster types. All pixel data is row-major with row 0 at the top of the
//! image; RGB data is interleaved per pixel.

use crate::error::{Error, Result};

/// Lower bound of a luminosity layer after the generator's clip.
pub const LAYER_MIN: f64 = 0.1;
pub const LAYER_MAX: f64 = 1.0;

/// Rec.709 luma weights for linear RGB.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

fn check_dims(width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Validation(format!("image dimensions must be positive, got {width}x{height}")));
    }
    if width * height * channels != len {
        return Err(Error::Dimension(format!(
            "{width}x{height}x{channels} needs {} values, got {len}",
            width * height * channels
        )));
    }
    Ok(())
}

fn check_range(data: &[f64], lo: f64, hi: f64, what: &str) -> Result<()> {
    if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= lo && **v <= hi)) {
        return Err(Error::Validation(format!("{what} value {v} at index {i} outside [{lo}, {hi}]")));
    }
    Ok(())
}

macro_rules! raster_accessors {
    () => {
        pub fn width(&self) -> usize {
            self.width
        }

        pub fn height(&self) -> usize {
            self.height
        }

        pub fn num_pixels(&self) -> usize {
            self.width * self.height
        }

        pub fn data(&self) -> &[f64] {
            &self.data
        }

        pub fn into_data(self) -> Vec<f64> {
            self.data
        }
    };
}

/// Linear-light RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl LinearImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, 3, data.len())?;
        check_range(&data, 0.0, 1.0, "linear image")?;
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data)
    }

    /// Build from a per-pixel function of `(x, y)`; output is clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(width, height, data)
    }

    raster_accessors!();

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn same_size<T: Raster>(&self, other: &T) -> bool {
        self.width == other.width() && self.height == other.height()
    }
}

/// Single-channel multiply/divide layer with values in `[0.1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LuminosityLayer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl LuminosityLayer {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, 1, data.len())?;
        check_range(&data, LAYER_MIN, LAYER_MAX, "luminosity layer")?;
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    raster_accessors!();
}

/// Colour overlay plus transparency, all channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbaLayer {
    width: usize,
    height: usize,
    rgb: Vec<f64>,
    alpha: Vec<f64>,
}

impl RgbaLayer {
    pub fn new(width: usize, height: usize, rgb: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        check_dims(width, height, 3, rgb.len())?;
        check_dims(width, height, 1, alpha.len())?;
        check_range(&rgb, 0.0, 1.0, "overlay rgb")?;
        check_range(&alpha, 0.0, 1.0, "overlay alpha")?;
        Ok(Self { width, height, rgb, alpha })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb(&self) -> &[f64] {
        &self.rgb
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }
}

/// Gamma-encoded sRGB image with values in `[0, 1]`, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SrgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl SrgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, 3, data.len())?;
        check_range(&data, 0.0, 1.0, "srgb image")?;
        Ok(Self { width, height, data })
    }

    raster_accessors!();
}

pub trait Raster {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
}

macro_rules! impl_raster {
    ($($t:ty),*) => {$(
        impl Raster for $t {
            fn width(&self) -> usize { self.width }
            fn height(&self) -> usize { self.height }
        }
    )*};
}
impl_raster!(LinearImage, LuminosityLayer, RgbaLayer, SrgbImage);

pub(crate) fn ensure_same_size(a: &impl Raster, b: &impl Raster, what: &str) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Dimension(format!(
            "{what}: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// sRGB electro-optical transfer function for one channel value.
pub fn srgb_eotf(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Inverse of [`srgb_eotf`].
pub fn srgb_oetf(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        v * 12.92
    } else if v >= 1.0 {
        1.0
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(img: &SrgbImage) -> Result<LinearImage> {
    check_range(&img.data, 0.0, 1.0, "srgb image")?;
    let data = img.data.iter().map(|&v| srgb_eotf(v).clamp(0.0, 1.0)).collect();
    LinearImage::new(img.width, img.height, data)
}

pub fn linear_to_srgb(img: &LinearImage) -> Result<SrgbImage> {
    check_range(&img.data, 0.0, 1.0, "linear image")?;
    let data = img.data.iter().map(|&v| srgb_oetf(v).clamp(0.0, 1.0)).collect();
    SrgbImage::new(img.width, img.height, data)
}

/// Per-pixel Rec.709 luma of a linear image.
pub fn luminance(img: &LinearImage) -> Vec<f64> {
    img.pixels().map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2]).collect()
}
