//! Pixel metrics, the analytic direction oracle and the luminosity
//! preservation audit.

use crate::diffusion::convert::image_to_tensor;
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::image::{ensure_same_size, luminance, LinearImage};
use crate::scene::{self, LightSpec, SceneSpec, NUM_DIRECTIONS};

/// Base channels at or below this are too dark for a stable ratio.
pub const AUDIT_MIN_BASE: f64 = 0.02;

pub fn mse(pred: &LinearImage, gt: &LinearImage) -> Result<f64> {
    ensure_same_size(pred, gt, "mse")?;
    let d = pred.data();
    let n = d.len().max(1) as f64;
    Ok(d.iter().zip(gt.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

fn mse_values(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Mean squared distance between the denoiser's bottleneck activations.
pub fn feature_distance(pred: &LinearImage, gt: &LinearImage, denoiser: &Denoiser) -> Result<f64> {
    ensure_same_size(pred, gt, "feature distance")?;
    if !denoiser.is_trained() {
        return Err(Error::Untrained("denoiser"));
    }
    if pred.data() == gt.data() {
        return Ok(0.0);
    }
    let fp = denoiser.features(&image_to_tensor(pred));
    let fg = denoiser.features(&image_to_tensor(gt));
    Ok(fp.data().iter().zip(fg.data()).map(|(&a, &b)| f64::from(a - b).powi(2)).sum::<f64>() / fp.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub best_index: usize,
    /// 1-based rank of the requested index among the twelve distances.
    pub rank: usize,
    pub distances: Vec<f64>,
}

/// Distances from `edited`'s luminance to each ground-truth render's luminance.
pub fn oracle_distances(edited: &LinearImage, scene: &SceneSpec, light: &LightSpec) -> Result<Vec<f64>> {
    if edited.width() != scene.size || edited.height() != scene.size {
        return Err(Error::Dimension(format!(
            "edited image is {}x{}, scene is {}px",
            edited.width(),
            edited.height(),
            scene.size
        )));
    }
    let le = luminance(edited);
    (0..NUM_DIRECTIONS)
        .map(|i| {
            let l = LightSpec { direction_index: i, ..*light };
            Ok(mse_values(&le, &luminance(&scene::render_relit(scene, &l)?)))
        })
        .collect()
}

/// Rank positions with ties broken toward the lower index.
fn rank_of(distances: &[f64], index: usize) -> usize {
    let d = distances[index];
    1 + distances.iter().enumerate().filter(|&(j, &v)| v < d || (v == d && j < index)).count()
}

pub fn direction_oracle(edited: &LinearImage, scene: &SceneSpec, requested: usize) -> Result<OracleResult> {
    direction_oracle_with(edited, scene, &LightSpec::new(0), requested)
}

/// As [`direction_oracle`], rendering with the ambient and intensity of `light`.
pub fn direction_oracle_with(edited: &LinearImage, scene: &SceneSpec, light: &LightSpec, requested: usize) -> Result<OracleResult> {
    if requested >= NUM_DIRECTIONS {
        return Err(Error::OutOfRange { what: "direction index", value: requested as i64, range: "[0, 12)" });
    }
    let distances = oracle_distances(edited, scene, light)?;
    let best_index = (0..NUM_DIRECTIONS).fold(0, |best, i| if distances[i] < distances[best] { i } else { best });
    Ok(OracleResult { best_index, rank: rank_of(&distances, requested), distances })
}

/// Largest spread of per-channel ratios `edited / base` over pixels where
/// every base channel exceeds [`AUDIT_MIN_BASE`] and no edited channel sits
/// at a clamp bound.
pub fn preservation_audit(base: &LinearImage, edited: &LinearImage) -> Result<f64> {
    ensure_same_size(base, edited, "preservation audit")?;
    let mut worst: f64 = 0.0;
    for (b, e) in base.pixels().zip(edited.pixels()) {
        if b.iter().any(|&v| v <= AUDIT_MIN_BASE) || e.iter().any(|&v| v == 0.0 || v == 1.0) {
            continue;
        }
        let r = [e[0] / b[0], e[1] / b[1], e[2] / b[2]];
        let spread = r.iter().cloned().fold(f64::MIN, f64::max) - r.iter().cloned().fold(f64::MAX, f64::min);
        worst = worst.max(spread);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compose::compose_relight;
    use crate::image::LuminosityLayer;
    use crate::seed;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn mse_examples() {
        let a = LinearImage::filled(4, 4, [0.2, 0.4, 0.6]).unwrap();
        let b = LinearImage::filled(4, 4, [0.3, 0.5, 0.7]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        assert!(mse(&a, &LinearImage::filled(2, 4, [0.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn oracle_recovers_exact_and_noisy_renders() {
        let scene = scene::sample_scene(21, 32, 5).unwrap();
        let exact = scene::render_relit(&scene, &LightSpec::new(5)).unwrap();
        let r = direction_oracle(&exact, &scene, 5).unwrap();
        // Independent brute force over the twelve renders.
        let lum = luminance(&exact);
        let brute: Vec<f64> = (0..12)
            .map(|i| {
                let li = luminance(&scene::render_relit(&scene, &LightSpec::new(i)).unwrap());
                lum.iter().zip(&li).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .collect();
        let argmin = (0..12).min_by(|&a, &b| brute[a].total_cmp(&brute[b])).unwrap();
        assert_eq!((r.best_index, r.rank, argmin), (5, 1, 5));

        let mut rng = seed::rng(3);
        let n = Normal::new(0.0, 0.005).unwrap();
        let noisy = LinearImage::from_fn(32, 32, |x, y| exact.pixel(x, y).map(|v| v + n.sample(&mut rng))).unwrap();
        assert_eq!(direction_oracle(&noisy, &scene, 5).unwrap().best_index, 5);
    }

    #[test]
    fn oracle_tie_break_prefers_lowest_index() {
        let d = [0.5, 0.2, 0.2, 0.9];
        assert_eq!(rank_of(&d, 1), 1);
        assert_eq!(rank_of(&d, 2), 2);
        assert_eq!(rank_of(&d, 0), 3);
        // A flat scene renders identically under every light.
        let flat = SceneSpec { blobs: vec![], ..scene::sample_scene(0, 32, 0).unwrap() };
        let img = scene::render_uniform(&flat, 0.9).unwrap();
        let r = direction_oracle(&img, &flat, 7).unwrap();
        assert_eq!((r.best_index, r.rank), (0, 8));
    }

    #[test]
    fn audit_examples() {
        let base = LinearImage::from_fn(8, 8, |x, y| [0.1 + 0.05 * x as f64, 0.2 + 0.05 * y as f64, 0.3]).unwrap();
        assert_eq!(preservation_audit(&base, &base).unwrap(), 0.0);
        let shade = LuminosityLayer::new(8, 8, (0..64).map(|i| 0.1 + 0.9 * i as f64 / 63.0).collect()).unwrap();
        let light = LuminosityLayer::filled(8, 8, 0.7).unwrap();
        let edited = compose_relight(&base, &shade, &light).unwrap();
        assert!(preservation_audit(&base, &edited).unwrap() <= 1e-6);
        let red = LinearImage::from_fn(8, 8, |x, y| {
            let p = base.pixel(x, y);
            [p[0] * 1.5, p[1], p[2]]
        })
        .unwrap();
        assert!(preservation_audit(&base, &red).unwrap() >= 0.5);
    }
}

pub mod benchmark {
    //! Distill every requested (test scene, direction) case and score it.

    use std::fs;
    use std::path::Path;

    use layerlight_nn::par;
    use serde::{Deserialize, Serialize};

    use super::*;
    use crate::config::EvalConfig;
    use crate::dataset::{Manifest, Split};
    use crate::diffusion::Scorer;
    use crate::distill::{distill_relight, trace_csv, DistillConfig, DistillResult};
    use crate::diffusion::DiffusionSchedule;
    use crate::pngio;
    use crate::seed;

    pub const REPORT_SCHEMA_VERSION: u32 = 1;

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct CaseRow {
        pub scene_id: usize,
        pub category_id: usize,
        pub direction: usize,
        pub predicted_direction: usize,
        pub direction_top1: bool,
        pub direction_rank: usize,
        pub mse: f64,
        pub feature_distance: f64,
        pub preservation_violation: f64,
    }

    /// Mean and standard error of the mean.
    #[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
    pub struct Stat {
        pub mean: f64,
        pub stderr: f64,
    }

    impl Stat {
        pub fn of(values: &[f64]) -> Self {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            Self { mean, stderr: (var / n).sqrt() }
        }
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct Aggregate {
        pub cases: usize,
        pub top1_accuracy: Stat,
        pub mean_rank: Stat,
        pub mse: Stat,
        pub feature_distance: Stat,
        pub max_preservation_violation: f64,
    }

    impl Aggregate {
        pub fn of(rows: &[CaseRow]) -> Self {
            let col = |f: &dyn Fn(&CaseRow) -> f64| Stat::of(&rows.iter().map(f).collect::<Vec<_>>());
            Self {
                cases: rows.len(),
                top1_accuracy: col(&|r| f64::from(u8::from(r.direction_top1))),
                mean_rank: col(&|r| r.direction_rank as f64),
                mse: col(&|r| r.mse),
                feature_distance: col(&|r| r.feature_distance),
                max_preservation_violation: rows.iter().map(|r| r.preservation_violation).fold(0.0, f64::max),
            }
        }
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct EvalReport {
        pub schema_version: u32,
        pub distill: DistillConfig,
        pub eval: EvalConfig,
        pub rows: Vec<CaseRow>,
        pub aggregate: Aggregate,
    }

    impl EvalReport {
        pub fn to_csv(&self) -> String {
            let mut s = String::from(
                "scene_id,category_id,direction,predicted_direction,direction_top1,direction_rank,mse,feature_distance,preservation_violation\n",
            );
            for r in &self.rows {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{:e},{:e},{:e}\n",
                    r.scene_id,
                    r.category_id,
                    r.direction,
                    r.predicted_direction,
                    u8::from(r.direction_top1),
                    r.direction_rank,
                    r.mse,
                    r.feature_distance,
                    r.preservation_violation
                ));
            }
            s
        }

        pub fn write(&self, json_path: &Path) -> Result<()> {
            if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(json_path, e))?;
            fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
            let csv = json_path.with_extension("csv");
            fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
        }
    }

    /// Seed for one case, independent of evaluation order.
    pub fn case_seed(base: u64, scene_id: usize, direction: usize) -> u64 {
        seed::derive_seed(base, &[0xE7A1, scene_id as u64, direction as u64])
    }

    /// Write `shade.png`, `light.png`, `edited.png`, `trace.csv`.
    pub fn write_distill_outputs(dir: &Path, r: &DistillResult) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        pngio::write_layer_png(&dir.join("shade.png"), &r.shade)?;
        pngio::write_layer_png(&dir.join("light.png"), &r.light)?;
        pngio::write_linear_png(&dir.join("edited.png"), &r.edited)?;
        let p = dir.join("trace.csv");
        fs::write(&p, trace_csv(&r.trace)).map_err(|e| Error::io(&p, e))
    }

    /// Distill and score every case. Per-case outputs go under
    /// `out_dir/cases/` when `out_dir` is given.
    pub fn run_benchmark(
        manifest: &Manifest,
        scorer: &Scorer<'_>,
        schedule: &DiffusionSchedule,
        distill: &DistillConfig,
        eval: &EvalConfig,
        out_dir: Option<&Path>,
    ) -> Result<EvalReport> {
        eval.validate()?;
        scorer.ensure_trained()?;
        let mut rows: Vec<_> = manifest.split(Split::Test).collect();
        if let Some(n) = eval.max_scenes {
            rows.truncate(n);
        }
        if rows.is_empty() {
            return Err(Error::Dataset("the test split is empty".into()));
        }
        let samples = rows.iter().map(|r| manifest.load_sample(r)).collect::<Result<Vec<_>>>()?;
        let cases: Vec<(usize, usize)> =
            (0..samples.len()).flat_map(|i| eval.directions.iter().map(move |&d| (i, d))).collect();
        log::info!("evaluating {} cases ({} scenes x {} directions)", cases.len(), samples.len(), eval.directions.len());
        let results = par::map_indexed(cases.len(), |k| -> Result<CaseRow> {
            let (i, d) = cases[k];
            let s = &samples[i];
            let cfg = DistillConfig { seed: case_seed(distill.seed, s.scene_id, d), ..distill.clone() };
            let r = distill_relight(&s.uniform_image, d, Some(s.category_id), scorer, schedule, &cfg)?;
            let light = s.record.light(d);
            let gt = scene::render_relit(&s.record.scene, &light)?;
            let oracle = direction_oracle_with(&r.edited, &s.record.scene, &light, d)?;
            if let Some(dir) = out_dir {
                write_distill_outputs(&dir.join("cases").join(format!("scene_{:04}_dir_{d:02}", s.scene_id)), &r)?;
            }
            let row = CaseRow {
                scene_id: s.scene_id,
                category_id: s.category_id,
                direction: d,
                predicted_direction: oracle.best_index,
                direction_top1: oracle.best_index == d,
                direction_rank: oracle.rank,
                mse: mse(&r.edited, &gt)?,
                feature_distance: feature_distance(&r.edited, &gt, scorer.denoiser)?,
                preservation_violation: preservation_audit(&s.uniform_image, &r.edited)?,
            };
            log::info!(
                "scene {} dir {d}: predicted {} rank {} mse {:.5}",
                row.scene_id,
                row.predicted_direction,
                row.direction_rank,
                row.mse
            );
            Ok(row)
        });
        let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
        let aggregate = Aggregate::of(&rows);
        Ok(EvalReport { schema_version: REPORT_SCHEMA_VERSION, distill: distill.clone(), eval: eval.clone(), rows, aggregate })
    }
}
