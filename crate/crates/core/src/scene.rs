//! Procedural 2.5-D scenes: Gaussian height bumps over a flat ground plane,
//! each bump painted with its own albedo, lit by a Lambertian model.
//!
//! Scene coordinates are in pixels with `x` to the right, `y` up and `z` out
//! of the image; pixel `(col, row)` has its centre at
//! `(col + 0.5, size - row - 0.5)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LinearImage;
use crate::seed;

pub const NUM_DIRECTIONS: usize = 12;
pub const NUM_CATEGORIES: usize = 8;
pub const SUPPORTED_SIZES: [usize; 3] = [32, 64, 128];
pub const LIGHT_ELEVATION_DEG: f64 = 45.0;
pub const DEFAULT_AMBIENT: f64 = 0.2;
pub const DEFAULT_INTENSITY: f64 = 1.0;
pub const DEFAULT_UNIFORM_LEVEL: f64 = 0.9;

const ALBEDO_RANGE: (f64, f64) = (0.05, 0.95);

/// Shape families: blob count (1 to 4) crossed with a small or large radius class.
pub const CATEGORY_NAMES: [&str; NUM_CATEGORIES] = [
    "single small blob",
    "single large blob",
    "pair of small blobs",
    "pair of large blobs",
    "trio of small blobs",
    "trio of large blobs",
    "cluster of small blobs",
    "cluster of large blobs",
];

pub fn category_blob_count(category_id: usize) -> usize {
    category_id / 2 + 1
}

pub fn category_is_large(category_id: usize) -> bool {
    category_id % 2 == 1
}

/// Conditioning text the scorer's index embeddings stand in for.
pub fn prompt(category_id: usize, direction: usize) -> String {
    format!("A photo of a {} with {direction} lighting", CATEGORY_NAMES[category_id % NUM_CATEGORIES])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 2],
    pub radius: f64,
    pub height: f64,
    pub albedo: [f64; 3],
}

impl Blob {
    /// Standard deviation of the Gaussian bump.
    pub fn sigma(&self) -> f64 {
        self.radius / 2.0
    }

    fn bump(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let s2 = self.sigma() * self.sigma();
        let h = self.height * (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
        (h, -h * dx / s2, -h * dy / s2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub category_id: usize,
    pub blobs: Vec<Blob>,
    pub background_albedo: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightSpec {
    pub direction_index: usize,
    pub elevation_deg: f64,
    pub intensity: f64,
    pub ambient: f64,
}

impl LightSpec {
    pub fn new(direction_index: usize) -> Self {
        Self {
            direction_index,
            elevation_deg: LIGHT_ELEVATION_DEG,
            intensity: DEFAULT_INTENSITY,
            ambient: DEFAULT_AMBIENT,
        }
    }

    pub fn with_ambient(self, ambient: f64) -> Self {
        Self { ambient, ..self }
    }

    pub fn with_intensity(self, intensity: f64) -> Self {
        Self { intensity, ..self }
    }

    /// Azimuth in degrees, counter-clockwise from the image's +x axis.
    pub fn azimuth_deg(&self) -> f64 {
        90.0 + 30.0 * self.direction_index as f64
    }
}

pub struct NormalField {
    pub size: usize,
    pub heights: Vec<f64>,
    pub normals: Vec<[f64; 3]>,
}

pub fn pixel_center(size: usize, col: usize, row: usize) -> (f64, f64) {
    (col as f64 + 0.5, size as f64 - row as f64 - 0.5)
}

pub fn sample_scene(seed: u64, size: usize, category_id: usize) -> Result<SceneSpec> {
    if !SUPPORTED_SIZES.contains(&size) {
        return Err(Error::Validation(format!("unsupported scene size {size}, expected one of {SUPPORTED_SIZES:?}")));
    }
    if category_id >= NUM_CATEGORIES {
        return Err(Error::OutOfRange { what: "category", value: category_id as i64, range: "[0, 8)" });
    }
    let mut rng = seed::rng(seed);
    let s = size as f64;
    let (r_lo, r_hi) = (s / 8.0, s / 3.0);
    let r_mid = 0.5 * (r_lo + r_hi);
    let (lo, hi) = if category_is_large(category_id) { (r_mid, r_hi) } else { (r_lo, r_mid) };
    let albedo = |rng: &mut seed::Rng| -> [f64; 3] {
        [0, 1, 2].map(|_| rng.random_range(ALBEDO_RANGE.0..=ALBEDO_RANGE.1))
    };
    let blobs = (0..category_blob_count(category_id))
        .map(|_| {
            let radius = rng.random_range(lo..=hi);
            let center = [rng.random_range(radius..=s - radius), rng.random_range(radius..=s - radius)];
            let height = radius * rng.random_range(0.5..=1.2);
            Blob { center, radius, height, albedo: albedo(&mut rng) }
        })
        .collect();
    let background_albedo = albedo(&mut rng);
    Ok(SceneSpec { seed, size, category_id, blobs, background_albedo })
}

/// Height `h(x, y)` at a point in scene coordinates.
pub fn height_at(scene: &SceneSpec, x: f64, y: f64) -> f64 {
    scene.blobs.iter().map(|b| b.bump(x, y).0).sum()
}

pub fn height_and_normals(scene: &SceneSpec) -> NormalField {
    let n = scene.size;
    let mut heights = Vec::with_capacity(n * n);
    let mut normals = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let (x, y) = pixel_center(n, col, row);
            let (mut h, mut hx, mut hy) = (0.0, 0.0, 0.0);
            for b in &scene.blobs {
                let (bh, bx, by) = b.bump(x, y);
                h += bh;
                hx += bx;
                hy += by;
            }
            let len = (hx * hx + hy * hy + 1.0).sqrt();
            heights.push(h);
            normals.push([-hx / len, -hy / len, 1.0 / len]);
        }
    }
    NormalField { size: n, heights, normals }
}

/// Per-pixel albedo: the blob whose bump dominates among those covering the
/// pixel (distance within its radius), otherwise the background.
pub fn albedo_map(scene: &SceneSpec) -> Vec<[f64; 3]> {
    let n = scene.size;
    let mut out = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let (x, y) = pixel_center(n, col, row);
            let owner = scene
                .blobs
                .iter()
                .filter(|b| (x - b.center[0]).hypot(y - b.center[1]) <= b.radius)
                .map(|b| (b.bump(x, y).0, b))
                .max_by(|a, b| a.0.total_cmp(&b.0));
            out.push(owner.map_or(scene.background_albedo, |(_, b)| b.albedo));
        }
    }
    out
}

/// Unit vector pointing from the scene toward light `index`.
pub fn light_direction(index: usize) -> Result<[f64; 3]> {
    light_direction_at(index, LIGHT_ELEVATION_DEG)
}

pub fn light_direction_at(index: usize, elevation_deg: f64) -> Result<[f64; 3]> {
    if index >= NUM_DIRECTIONS {
        return Err(Error::OutOfRange { what: "direction index", value: index as i64, range: "[0, 12)" });
    }
    let az = (90.0 + 30.0 * index as f64).to_radians();
    let el = elevation_deg.to_radians();
    Ok([el.cos() * az.cos(), el.cos() * az.sin(), el.sin()])
}

pub fn render_relit(scene: &SceneSpec, light: &LightSpec) -> Result<LinearImage> {
    let l = light_direction_at(light.direction_index, light.elevation_deg)?;
    let field = height_and_normals(scene);
    let albedo = albedo_map(scene);
    let n = scene.size;
    LinearImage::from_fn(n, n, |col, row| {
        let i = row * n + col;
        let nv = field.normals[i];
        let ndotl = (nv[0] * l[0] + nv[1] * l[1] + nv[2] * l[2]).max(0.0);
        let shading = light.ambient + (1.0 - light.ambient) * light.intensity * ndotl;
        albedo[i].map(|a| a * shading)
    })
}

pub fn render_uniform(scene: &SceneSpec, level: f64) -> Result<LinearImage> {
    let albedo = albedo_map(scene);
    let n = scene.size;
    LinearImage::from_fn(n, n, |col, row| albedo[row * n + col].map(|a| a * level))
}
