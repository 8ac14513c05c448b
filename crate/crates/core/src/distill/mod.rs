//! Score distillation of editing layers against the frozen diffusion prior.

pub mod colorize;
pub mod generator;
pub mod relight;
pub mod sds;

pub use colorize::{distill_colorize, edge_map_distance, ColorizeConfig, ColorizeResult, EdgeMapRegularizer, StructureRegularizer};
pub use generator::{Generator, GeneratorConfig, GeneratorHead};
pub use relight::{distill_relight, distill_relight_with, trace_csv, DistillConfig, DistillResult, RelightDistiller, TraceRow};
pub use sds::{reg_loss, sds_grad, vsd_grad};
