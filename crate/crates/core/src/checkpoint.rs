//! Binary tensor container: magic, little-endian `u64` header length, JSON
//! header, then raw little-endian `f32` data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use layerlight_nn::{ParamStore, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::{Adapter, AdapterConfig, Denoiser, DenoiserConfig, DiffusionSchedule, ScheduleKind};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LLTENSOR";
pub const FORMAT_VERSION: u32 = 1;
/// Headers beyond this size are treated as corrupt.
const MAX_HEADER: u64 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    /// `[c, b, h, w]`.
    pub shape: [usize; 4],
    pub dtype: String,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub num_steps: usize,
}

impl ScheduleParams {
    pub fn of(s: &DiffusionSchedule) -> Self {
        Self { kind: s.kind, num_steps: s.num_steps }
    }

    pub fn build(&self) -> Result<DiffusionSchedule> {
        crate::diffusion::make_schedule(self.num_steps, self.kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// `denoiser` or `adapter`.
    pub kind: String,
    pub model_config: serde_json::Value,
    pub training_config: serde_json::Value,
    pub schedule: ScheduleParams,
    pub seed: u64,
    pub trained_steps: u64,
    pub tensors: BTreeMap<String, TensorEntry>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), message: message.into() }
}

pub struct CheckpointMeta<'a> {
    pub kind: &'a str,
    pub model_config: serde_json::Value,
    pub training_config: serde_json::Value,
    pub schedule: &'a DiffusionSchedule,
    pub seed: u64,
    pub trained_steps: u64,
}

pub fn save_store(path: &Path, store: &ParamStore, meta: CheckpointMeta<'_>) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mut data = Vec::new();
    for (name, t) in store.iter() {
        let s = t.shape();
        tensors.insert(
            name.to_string(),
            TensorEntry { shape: [s.c, s.b, s.h, s.w], dtype: "f32".into(), offset: data.len() as u64 },
        );
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: meta.kind.to_string(),
        model_config: meta.model_config,
        training_config: meta.training_config,
        schedule: ScheduleParams::of(meta.schedule),
        seed: meta.seed,
        trained_steps: meta.trained_steps,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a checkpoint file (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if hlen > MAX_HEADER || 16 + hlen > bytes.len() as u64 {
        return Err(corrupt(path, "truncated or corrupt header"));
    }
    let hend = 16 + hlen as usize;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[16..hend]).map_err(|e| corrupt(path, format!("corrupt header: {e}")))?;
    let version = raw.get("format_version").and_then(serde_json::Value::as_u64);
    if version != Some(u64::from(FORMAT_VERSION)) {
        return Err(corrupt(
            path,
            format!("incompatible format_version {version:?}, this build reads version {FORMAT_VERSION}"),
        ));
    }
    let header: CheckpointHeader =
        serde_json::from_value(raw).map_err(|e| corrupt(path, format!("corrupt header: {e}")))?;
    let data = &bytes[hend..];
    let mut tensors = BTreeMap::new();
    let mut expected_len = 0u64;
    for (name, e) in &header.tensors {
        if e.dtype != "f32" {
            return Err(corrupt(path, format!("tensor {name}: unsupported dtype {}", e.dtype)));
        }
        let shape = Shape::new(e.shape[0], e.shape[1], e.shape[2], e.shape[3]);
        let nbytes = shape.len() as u64 * 4;
        let end = e.offset.checked_add(nbytes).ok_or_else(|| corrupt(path, "offset overflow"))?;
        if end > data.len() as u64 {
            return Err(corrupt(path, format!("truncated data: tensor {name} ends at byte {end} of {}", data.len())));
        }
        let slice = &data[e.offset as usize..end as usize];
        let values = slice.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.insert(name.clone(), Tensor::from_vec(shape, values));
        expected_len += nbytes;
    }
    if expected_len != data.len() as u64 {
        return Err(corrupt(path, format!("data section is {} bytes, header accounts for {expected_len}", data.len())));
    }
    Ok(Checkpoint { header, tensors })
}

/// Copy every tensor of `ckpt` into the matching parameter of `store`.
/// Names must match one to one and shapes exactly.
pub fn restore_store(path: &Path, store: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.tensors.len() != store.len() {
        return Err(corrupt(path, format!("checkpoint has {} tensors, model expects {}", ckpt.tensors.len(), store.len())));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = ckpt.tensors.get(&name).ok_or_else(|| corrupt(path, format!("missing tensor {name}")))?;
        if t.shape() != store.get(id).shape() {
            return Err(corrupt(path, format!("tensor {name}: shape {} does not match model {}", t.shape(), store.get(id).shape())));
        }
        store.set(id, t.clone());
    }
    Ok(())
}

fn expect_kind(path: &Path, ckpt: &Checkpoint, kind: &str) -> Result<()> {
    if ckpt.header.kind != kind {
        return Err(corrupt(path, format!("expected a {kind} checkpoint, found {}", ckpt.header.kind)));
    }
    Ok(())
}

pub fn save_denoiser(path: &Path, d: &Denoiser, training_config: serde_json::Value, schedule: &DiffusionSchedule, seed: u64) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "denoiser",
        model_config: serde_json::to_value(&d.config).expect("config serializes"),
        training_config,
        schedule,
        seed,
        trained_steps: d.trained_steps,
    };
    save_store(path, &d.store, meta)
}

pub fn load_denoiser(path: &Path) -> Result<(Denoiser, CheckpointHeader)> {
    let ckpt = load_checkpoint(path)?;
    expect_kind(path, &ckpt, "denoiser")?;
    let cfg: DenoiserConfig = serde_json::from_value(ckpt.header.model_config.clone())
        .map_err(|e| corrupt(path, format!("bad model config: {e}")))?;
    let mut d = Denoiser::new(cfg, ckpt.header.seed);
    restore_store(path, &mut d.store, &ckpt)?;
    d.trained_steps = ckpt.header.trained_steps;
    Ok((d, ckpt.header))
}

#[derive(Serialize, Deserialize)]
struct AdapterModelConfig {
    adapter: AdapterConfig,
    target: [usize; 3],
}

pub fn save_adapter(path: &Path, a: &Adapter, training_config: serde_json::Value, schedule: &DiffusionSchedule, seed: u64) -> Result<()> {
    let cfg = AdapterModelConfig { adapter: a.config.clone(), target: a.target };
    let meta = CheckpointMeta {
        kind: "adapter",
        model_config: serde_json::to_value(&cfg).expect("config serializes"),
        training_config,
        schedule,
        seed,
        trained_steps: a.trained_steps,
    };
    save_store(path, &a.store, meta)
}

pub fn load_adapter(path: &Path) -> Result<(Adapter, CheckpointHeader)> {
    let ckpt = load_checkpoint(path)?;
    expect_kind(path, &ckpt, "adapter")?;
    let cfg: AdapterModelConfig = serde_json::from_value(ckpt.header.model_config.clone())
        .map_err(|e| corrupt(path, format!("bad model config: {e}")))?;
    let mut a = Adapter::new(cfg.adapter, cfg.target, ckpt.header.seed);
    restore_store(path, &mut a.store, &ckpt)?;
    a.trained_steps = ckpt.header.trained_steps;
    Ok((a, ckpt.header))
}
