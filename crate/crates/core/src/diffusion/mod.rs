//! Toy conditional diffusion prior over minirelit images.

pub mod convert;
pub mod model;
pub mod sample;
pub mod schedule;
pub mod train;

pub use model::{cfg_predict, Adapter, AdapterConfig, ConditionSpec, Denoiser, DenoiserConfig, GuidanceMode, NoisePredictor, Scorer};
pub use schedule::{add_noise, make_schedule, DiffusionSchedule, ScheduleKind};
pub use train::{train_adapter, train_denoiser, AdapterTrainConfig, DenoiserTrainConfig, TrainReport, TrainingSet};
pub use sample::{sample, SampleConfig};
