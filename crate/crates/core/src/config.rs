//! Run configuration. Precedence, lowest first: built-in defaults, config
//! file, `LAYERLIGHT_SEED`, command-line flags. A global `seed` overrides
//! every per-stage seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::ScheduleParams;
use crate::dataset::DatasetConfig;
use crate::diffusion::{AdapterConfig, AdapterTrainConfig, DenoiserConfig, DenoiserTrainConfig, SampleConfig, ScheduleKind};
use crate::distill::{ColorizeConfig, DistillConfig};
use crate::error::{Error, Result};
use crate::scene::NUM_DIRECTIONS;

pub const SEED_ENV: &str = "LAYERLIGHT_SEED";
pub const LOG_ENV: &str = "LAYERLIGHT_LOG";
pub const RESOLVED_CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub scorer: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub directions: Vec<usize>,
    /// Evaluate only the first this many test scenes.
    pub max_scenes: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { directions: vec![0, 3, 6, 9], max_scenes: None }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.directions.is_empty() {
            return Err(Error::Validation("no evaluation directions requested".into()));
        }
        if let Some(&d) = self.directions.iter().find(|&&d| d >= NUM_DIRECTIONS) {
            return Err(Error::OutOfRange { what: "direction index", value: d as i64, range: "[0, 12)" });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub log_level: String,
    pub paths: PathsConfig,
    pub data: DatasetConfig,
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserConfig,
    pub adapter: AdapterConfig,
    pub train_scorer: DenoiserTrainConfig,
    pub train_adapter: AdapterTrainConfig,
    pub sample: SampleConfig,
    pub distill: DistillConfig,
    pub colorize: ColorizeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            log_level: "info".into(),
            paths: PathsConfig::default(),
            data: DatasetConfig::default(),
            schedule: ScheduleParams { kind: ScheduleKind::Cosine, num_steps: 1000 },
            denoiser: DenoiserConfig::default(),
            adapter: AdapterConfig::default(),
            train_scorer: DenoiserTrainConfig::default(),
            train_adapter: AdapterTrainConfig::default(),
            sample: SampleConfig::default(),
            distill: DistillConfig::default(),
            colorize: ColorizeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// The desk-scale end-to-end preset.
    pub fn quick() -> Self {
        let mut c = Self::default();
        c.data.num_scenes = 200;
        c.data.size = 32;
        c.data.test_frac = 0.08;
        c.train_scorer.epochs = 30;
        c.train_adapter.iters = 5000;
        c.distill.iters = 700;
        c.distill.cfg_scale = 7.0;
        c.eval.directions = vec![0, 3, 6, 9];
        c.eval.max_scenes = Some(12);
        c
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.propagate_seed();
    }

    fn propagate_seed(&mut self) {
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.train_scorer.seed = s;
            self.train_adapter.seed = s;
            self.sample.seed = s;
            self.distill.seed = s;
            self.colorize.seed = s;
        }
    }

    /// Apply `LAYERLIGHT_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse::<u64>().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.set_seed(seed);
        }
        Ok(())
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        let mut c: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        c.propagate_seed();
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Write the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&p, self.to_json()).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

/// Defaults overlaid with the file at `path`. Unknown keys are rejected.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, "").unwrap();
        assert_eq!(load_config(&p).unwrap(), RunConfig::default());
        fs::write(&p, "{}").unwrap();
        assert_eq!(load_config(&p).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"distill": {"cfg_sclae": 3}}"#, "c.json").unwrap_err().to_string();
        assert!(err.contains("cfg_sclae"), "{err}");
        let err = RunConfig::from_json(r#"{"sed": 3}"#, "c.json").unwrap_err().to_string();
        assert!(err.contains("sed"), "{err}");
    }

    #[test]
    fn file_values_and_seed_propagation() {
        let c = RunConfig::from_json(r#"{"seed": 9, "distill": {"cfg_scale": 3.5}}"#, "c").unwrap();
        assert_eq!(c.distill.cfg_scale, 3.5);
        assert_eq!(c.distill.iters, 700);
        assert_eq!((c.data.seed, c.train_adapter.seed, c.distill.seed), (9, 9, 9));
        // Later layers win: a flag applied after the file.
        let mut c = c;
        c.distill.cfg_scale = 7.0;
        c.set_seed(4);
        assert_eq!((c.distill.cfg_scale, c.colorize.seed), (7.0, 4));
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::quick();
        assert_eq!(RunConfig::from_json(&c.to_json(), "x").unwrap(), c);
    }
}
