//! Pipeline stages shared by the command-line tool, and the end-to-end
//! `reproduce` run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::{load_adapter, load_denoiser, save_adapter, save_denoiser};
use crate::config::RunConfig;
use crate::dataset::{generate_dataset, prepare_out_dir, Manifest, Split};
use crate::diffusion::{train_adapter, train_denoiser, Adapter, Denoiser, DiffusionSchedule, Scorer, TrainReport, TrainingSet};
use crate::error::{Error, Result};
use crate::eval::benchmark::{run_benchmark, EvalReport};

pub fn schedule(cfg: &RunConfig) -> Result<DiffusionSchedule> {
    cfg.schedule.build()
}

fn write_loss_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut s = String::from("index,loss\n");
    for (i, l) in report.loss_curve.iter().enumerate() {
        s.push_str(&format!("{i},{l:e}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn guard_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::AlreadyExists(path.to_path_buf()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Sidecar path next to a checkpoint, e.g. `scorer.ckpt` -> `scorer.config.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_sidecar_config(ckpt: &Path, cfg: &RunConfig) -> Result<()> {
    let p = sidecar(ckpt, "config.json");
    fs::write(&p, cfg.to_json()).map_err(|e| Error::io(&p, e))
}

fn load_train_set(data_dir: &Path) -> Result<TrainingSet> {
    let m = Manifest::load(data_dir)?;
    let train = m.load_split(Split::Train)?;
    if train.is_empty() {
        return Err(Error::Dataset(format!("{}: the train split is empty", data_dir.display())));
    }
    TrainingSet::from_samples(&train)
}

pub fn stage_train_scorer(cfg: &RunConfig, data_dir: &Path, out: &Path, force: bool) -> Result<(Denoiser, TrainReport)> {
    guard_file(out, force)?;
    let set = load_train_set(data_dir)?;
    let sched = schedule(cfg)?;
    let mut d = Denoiser::new(cfg.denoiser.clone(), cfg.train_scorer.seed);
    let report = train_denoiser(&mut d, &set, &sched, &cfg.train_scorer)?;
    let tc = serde_json::to_value(&cfg.train_scorer).expect("config serializes");
    save_denoiser(out, &d, tc, &sched, cfg.train_scorer.seed)?;
    write_loss_csv(&sidecar(out, "loss.csv"), &report)?;
    write_sidecar_config(out, cfg)?;
    Ok((d, report))
}

pub fn stage_train_adapter(cfg: &RunConfig, data_dir: &Path, scorer: &Path, out: &Path, force: bool) -> Result<(Adapter, TrainReport)> {
    guard_file(out, force)?;
    let (d, header) = load_denoiser(scorer)?;
    let sched = header.schedule.build()?;
    let set = load_train_set(data_dir)?;
    let mut a = Adapter::new(cfg.adapter.clone(), d.config.widths, cfg.train_adapter.seed);
    let before = d.store.checksum();
    let report = train_adapter(&mut a, &d, &set, &sched, &cfg.train_adapter)?;
    debug_assert_eq!(before, d.store.checksum());
    let tc = serde_json::to_value(&cfg.train_adapter).expect("config serializes");
    save_adapter(out, &a, tc, &sched, cfg.train_adapter.seed)?;
    write_loss_csv(&sidecar(out, "loss.csv"), &report)?;
    write_sidecar_config(out, cfg)?;
    Ok((a, report))
}

/// Timings of a [`reproduce`] run, in seconds. Kept out of the report so
/// reports stay byte-identical across runs.
#[derive(Clone, Debug, Default)]
pub struct StageTimings {
    pub gen_data: f64,
    pub train_scorer: f64,
    pub train_adapter: f64,
    pub eval: f64,
}

/// gen-data, train-scorer, train-adapter and eval into `out_dir`.
pub fn reproduce(cfg: &RunConfig, out_dir: &Path, force: bool) -> Result<(EvalReport, StageTimings)> {
    prepare_out_dir(out_dir, force)?;
    cfg.write_resolved(out_dir)?;
    let mut times = StageTimings::default();

    let t = Instant::now();
    let data = out_dir.join("data");
    generate_dataset(&cfg.data, &data, true)?;
    times.gen_data = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let scorer_path = out_dir.join("scorer.ckpt");
    stage_train_scorer(cfg, &data, &scorer_path, true)?;
    times.train_scorer = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let adapter_path = out_dir.join("adapter.ckpt");
    stage_train_adapter(cfg, &data, &scorer_path, &adapter_path, true)?;
    times.train_adapter = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let report = stage_eval(cfg, &data, &scorer_path, &adapter_path, &out_dir.join("eval"), true)?;
    times.eval = t.elapsed().as_secs_f64();
    log::info!(
        "reproduce finished: gen-data {:.0}s, train-scorer {:.0}s, train-adapter {:.0}s, eval {:.0}s",
        times.gen_data,
        times.train_scorer,
        times.train_adapter,
        times.eval
    );
    Ok((report, times))
}

/// Distill the test split and write `report.json`, `report.csv` and per-case
/// outputs into `out_dir`.
pub fn stage_eval(cfg: &RunConfig, data_dir: &Path, scorer: &Path, adapter: &Path, out_dir: &Path, force: bool) -> Result<EvalReport> {
    prepare_out_dir(out_dir, force)?;
    cfg.write_resolved(out_dir)?;
    let (d, header) = load_denoiser(scorer)?;
    let (a, _) = load_adapter(adapter)?;
    let sched = header.schedule.build()?;
    let m = Manifest::load(data_dir)?;
    let sc = Scorer::new(&d, Some(&a));
    let report = run_benchmark(&m, &sc, &sched, &cfg.distill, &cfg.eval, Some(out_dir))?;
    report.write(&out_dir.join("report.json"))?;
    let agg = &report.aggregate;
    log::info!(
        "top-1 {:.3} (se {:.3}), mean rank {:.2}, mse {:.5}, max preservation violation {:.2e}",
        agg.top1_accuracy.mean,
        agg.top1_accuracy.stderr,
        agg.mean_rank.mean,
        agg.mse.mean,
        agg.max_preservation_violation
    );
    Ok(report)
}
