//! PNG persistence. Images are 8-bit sRGB; luminosity layers are 16-bit
//! grayscale holding `round(65535 * value)` in linear units.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType};

use crate::error::{Error, Result};
use crate::image::{linear_to_srgb, srgb_to_linear, LinearImage, LuminosityLayer, RgbaLayer, SrgbImage};

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png { path: path.to_path_buf(), message: e.to_string() }
}

fn encode(path: &Path, width: usize, height: usize, color: ColorType, depth: BitDepth, bytes: &[u8]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
        w.write_image_data(bytes).map_err(|e| png_err(path, e))?;
        w.finish().map_err(|e| png_err(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    bytes: Vec<u8>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(Cursor::new(raw)).read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut bytes = vec![0u8; size];
    let info = reader.next_frame(&mut bytes).map_err(|e| png_err(path, e))?;
    bytes.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes,
    })
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn write_srgb_png(path: &Path, img: &SrgbImage) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize_u8(v)).collect();
    encode(path, img.width(), img.height(), ColorType::Rgb, BitDepth::Eight, &bytes)
}

pub fn read_srgb_png(path: &Path) -> Result<SrgbImage> {
    let d = decode(path)?;
    if d.depth != BitDepth::Eight {
        return Err(png_err(path, format!("expected 8-bit image, got {:?}", d.depth)));
    }
    let data: Vec<f64> = match d.color {
        ColorType::Rgb => d.bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        ColorType::Rgba => d.bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).map(|b| f64::from(b) / 255.0).collect(),
        ColorType::Grayscale => d.bytes.iter().flat_map(|&b| [b; 3]).map(|b| f64::from(b) / 255.0).collect(),
        other => return Err(png_err(path, format!("unsupported colour type {other:?}"))),
    };
    SrgbImage::new(d.width, d.height, data)
}

/// Write a linear image as 8-bit sRGB.
pub fn write_linear_png(path: &Path, img: &LinearImage) -> Result<()> {
    write_srgb_png(path, &linear_to_srgb(img)?)
}

pub fn read_linear_png(path: &Path) -> Result<LinearImage> {
    srgb_to_linear(&read_srgb_png(path)?)
}

pub fn write_layer_png(path: &Path, layer: &LuminosityLayer) -> Result<()> {
    let bytes: Vec<u8> = layer.data().iter().flat_map(|&v| quantize_u16(v).to_be_bytes()).collect();
    encode(path, layer.width(), layer.height(), ColorType::Grayscale, BitDepth::Sixteen, &bytes)
}

pub fn read_layer_png(path: &Path) -> Result<LuminosityLayer> {
    let d = decode(path)?;
    if d.color != ColorType::Grayscale || d.depth != BitDepth::Sixteen {
        return Err(png_err(path, format!("expected 16-bit grayscale layer, got {:?}/{:?}", d.color, d.depth)));
    }
    let data = d.bytes.chunks_exact(2).map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / 65535.0).collect();
    LuminosityLayer::new(d.width, d.height, data)
}

/// Overlay as 8-bit RGBA: colour sRGB-encoded, alpha stored linearly.
pub fn write_rgba_png(path: &Path, layer: &RgbaLayer) -> Result<()> {
    let mut bytes = Vec::with_capacity(layer.alpha().len() * 4);
    for (rgb, &a) in layer.rgb().chunks_exact(3).zip(layer.alpha()) {
        bytes.extend(rgb.iter().map(|&v| quantize_u8(crate::image::srgb_oetf(v))));
        bytes.push(quantize_u8(a));
    }
    encode(path, layer.width(), layer.height(), ColorType::Rgba, BitDepth::Eight, &bytes)
}
