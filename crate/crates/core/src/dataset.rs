//! On-disk minirelit datasets: per-scene PNG renders plus a JSONL manifest.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use layerlight_nn::par;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LinearImage;
use crate::pngio;
use crate::scene::{self, LightSpec, SceneSpec, NUM_CATEGORIES, NUM_DIRECTIONS};
use crate::seed;

pub const GENERATOR_VERSION: &str = concat!("minirelit-", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MIN_SCENES: usize = 13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_scenes: usize,
    pub size: usize,
    pub test_frac: f64,
    pub seed: u64,
    pub ambient: f64,
    pub intensity: f64,
    pub uniform_level: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_scenes: 200,
            size: 32,
            test_frac: 0.08,
            seed: 0,
            ambient: scene::DEFAULT_AMBIENT,
            intensity: scene::DEFAULT_INTENSITY,
            uniform_level: scene::DEFAULT_UNIFORM_LEVEL,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scenes < MIN_SCENES {
            return Err(Error::Validation(format!("num_scenes must be at least {MIN_SCENES}, got {}", self.num_scenes)));
        }
        if !(0.0..1.0).contains(&self.test_frac) {
            return Err(Error::Validation(format!("test_frac must lie in [0, 1), got {}", self.test_frac)));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::Validation(format!("ambient must lie in [0, 1], got {}", self.ambient)));
        }
        if !(self.intensity >= 0.0 && self.uniform_level >= 0.0) {
            return Err(Error::Validation("intensity and uniform_level must be non-negative".into()));
        }
        if !scene::SUPPORTED_SIZES.contains(&self.size) {
            return Err(Error::Validation(format!("unsupported scene size {}", self.size)));
        }
        Ok(())
    }

    pub fn num_test(&self) -> usize {
        (self.test_frac * self.num_scenes as f64).round() as usize
    }

    pub fn light(&self, direction: usize) -> LightSpec {
        LightSpec::new(direction).with_ambient(self.ambient).with_intensity(self.intensity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub generator_version: String,
    pub global_seed: u64,
    pub config: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenePaths {
    pub uniform: String,
    pub relit: Vec<String>,
    pub scene: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub scene_id: usize,
    pub category_id: usize,
    pub split: Split,
    pub paths: ScenePaths,
    pub seed: u64,
}

/// Contents of `scene.json`: everything needed to re-render the scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub scene: SceneSpec,
    pub ambient: f64,
    pub intensity: f64,
    pub uniform_level: f64,
}

impl SceneRecord {
    pub fn light(&self, direction: usize) -> LightSpec {
        LightSpec::new(direction).with_ambient(self.ambient).with_intensity(self.intensity)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub rows: Vec<ManifestRow>,
}

/// One scene loaded into memory.
#[derive(Clone, Debug)]
pub struct DatasetSample {
    pub scene_id: usize,
    pub category_id: usize,
    pub split: Split,
    pub uniform_image: LinearImage,
    /// `relit_images[i]` is lit from direction `i`.
    pub relit_images: Vec<LinearImage>,
    pub record: SceneRecord,
    pub paths: ScenePaths,
}

impl DatasetSample {
    pub fn directions(&self) -> std::ops::Range<usize> {
        0..self.relit_images.len()
    }
}

pub fn scene_seed(global_seed: u64, scene_id: usize) -> u64 {
    seed::derive_seed(global_seed, &[0x5CE_4E, scene_id as u64])
}

fn scene_category(global_seed: u64, scene_id: usize) -> usize {
    (seed::derive_seed(global_seed, &[0xCA7, scene_id as u64]) % NUM_CATEGORIES as u64) as usize
}

/// Ids of the test scenes: the first `num_test` entries of a seeded shuffle.
pub fn test_ids(config: &DatasetConfig) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..config.num_scenes).collect();
    ids.shuffle(&mut seed::derived_rng(config.seed, &[0x5B1_17]));
    let mut test = ids[..config.num_test()].to_vec();
    test.sort_unstable();
    test
}

/// Refuse to write into a non-empty directory unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::AlreadyExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_scene(root: &Path, config: &DatasetConfig, scene_id: usize, split: Split) -> Result<ManifestRow> {
    let seed = scene_seed(config.seed, scene_id);
    let category_id = scene_category(config.seed, scene_id);
    let spec = scene::sample_scene(seed, config.size, category_id)?;
    let rel_dir = format!("scene_{scene_id:04}");
    let dir = root.join(&rel_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let uniform = format!("{rel_dir}/uniform.png");
    pngio::write_linear_png(&root.join(&uniform), &scene::render_uniform(&spec, config.uniform_level)?)?;
    let mut relit = Vec::with_capacity(NUM_DIRECTIONS);
    for i in 0..NUM_DIRECTIONS {
        let rel = format!("{rel_dir}/relit_{i:02}.png");
        pngio::write_linear_png(&root.join(&rel), &scene::render_relit(&spec, &config.light(i))?)?;
        relit.push(rel);
    }
    let record = SceneRecord {
        scene: spec,
        ambient: config.ambient,
        intensity: config.intensity,
        uniform_level: config.uniform_level,
    };
    let scene_rel = format!("{rel_dir}/scene.json");
    let scene_path = root.join(&scene_rel);
    let json = serde_json::to_vec_pretty(&record).map_err(|e| Error::json(&scene_path, e))?;
    fs::write(&scene_path, json).map_err(|e| Error::io(&scene_path, e))?;

    Ok(ManifestRow {
        scene_id,
        category_id,
        split,
        paths: ScenePaths { uniform, relit, scene: scene_rel },
        seed,
    })
}

pub fn generate_dataset(config: &DatasetConfig, out_dir: &Path, force: bool) -> Result<Manifest> {
    config.validate()?;
    prepare_out_dir(out_dir, force)?;
    let test = test_ids(config);
    log::info!(
        "generating {} scenes at {}px into {} ({} test)",
        config.num_scenes,
        config.size,
        out_dir.display(),
        test.len()
    );
    let rows = par::map_indexed(config.num_scenes, |id| {
        let split = if test.binary_search(&id).is_ok() { Split::Test } else { Split::Train };
        write_scene(out_dir, config, id, split)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let header = ManifestHeader {
        generator_version: GENERATOR_VERSION.to_string(),
        global_seed: config.seed,
        config: config.clone(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    write_line(&mut w, &path, &header)?;
    for row in &rows {
        write_line(&mut w, &path, row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(Manifest { root: out_dir.to_path_buf(), header, rows })
}

fn write_line<T: Serialize>(w: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string(value).map_err(|e| Error::json(path, e))?;
    writeln!(w, "{s}").map_err(|e| Error::io(path, e))
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Dataset(format!("{}: empty manifest", path.display())))?
            .map_err(|e| Error::io(&path, e))?;
        let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| Error::json(&path, e))?;
        let mut rows = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str::<ManifestRow>(&line).map_err(|e| Error::json(&path, e))?);
        }
        if rows.len() != header.config.num_scenes {
            return Err(Error::Dataset(format!(
                "{}: header declares {} scenes but {} rows are present",
                path.display(),
                header.config.num_scenes,
                rows.len()
            )));
        }
        Ok(Self { root: dir.to_path_buf(), header, rows })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn size(&self) -> usize {
        self.header.config.size
    }

    pub fn load_record(&self, row: &ManifestRow) -> Result<SceneRecord> {
        let path = self.root.join(&row.paths.scene);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(&path, e))
    }

    pub fn load_sample(&self, row: &ManifestRow) -> Result<DatasetSample> {
        if row.paths.relit.len() != NUM_DIRECTIONS {
            return Err(Error::Dataset(format!("scene {} lists {} relit images", row.scene_id, row.paths.relit.len())));
        }
        let uniform_image = pngio::read_linear_png(&self.root.join(&row.paths.uniform))?;
        let relit_images = row
            .paths
            .relit
            .iter()
            .map(|p| pngio::read_linear_png(&self.root.join(p)))
            .collect::<Result<Vec<_>>>()?;
        for img in &relit_images {
            if !img.same_size(&uniform_image) {
                return Err(Error::Dataset(format!("scene {}: relit images differ in size", row.scene_id)));
            }
        }
        Ok(DatasetSample {
            scene_id: row.scene_id,
            category_id: row.category_id,
            split: row.split,
            uniform_image,
            relit_images,
            record: self.load_record(row)?,
            paths: row.paths.clone(),
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<DatasetSample>> {
        let rows: Vec<&ManifestRow> = self.split(split).collect();
        par::map_indexed(rows.len(), |i| self.load_sample(rows[i])).into_iter().collect()
    }
}

/// Line drawing of an image's luminance contours: dark strokes on white.
pub fn make_sketch(img: &LinearImage) -> Result<LinearImage> {
    let (w, h) = (img.width(), img.height());
    let lum = crate::image::luminance(img);
    let at = |x: isize, y: isize| lum[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    LinearImage::from_fn(w, h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let gx = at(x + 1, y) - at(x - 1, y);
        let gy = at(x, y + 1) - at(x, y - 1);
        let v = 1.0 - 0.9 * ((gx * gx + gy * gy).sqrt() / 0.05).min(1.0);
        [v; 3]
    })
}
