use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use layerlight_core::checkpoint::{load_adapter, load_denoiser};
use layerlight_core::config::{load_config, RunConfig, LOG_ENV};
use layerlight_core::dataset::{generate_dataset, make_sketch, prepare_out_dir};
use layerlight_core::diffusion::{sample, ConditionSpec, Scorer};
use layerlight_core::distill::{distill_colorize, distill_relight, trace_csv, EdgeMapRegularizer};
use layerlight_core::error::{Error, Result};
use layerlight_core::eval::benchmark::write_distill_outputs;
use layerlight_core::pipeline;
use layerlight_core::pngio;

#[derive(Args)]
struct Common {
    /// JSON configuration file; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, applied to every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Log level (error, warn, info, debug, trace). Overrides LAYERLIGHT_LOG.
    #[arg(long, global = true)]
    log_level: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural relighting dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_scenes: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the conditional denoiser.
    TrainScorer {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Train the conditioning adapter on a frozen denoiser.
    TrainAdapter {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Draw one image from the diffusion prior.
    Sample {
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Conditioning image (sRGB PNG); needs --adapter.
        #[arg(long)]
        cond_image: Option<PathBuf>,
        #[arg(long)]
        direction: Option<usize>,
        #[arg(long)]
        category: Option<usize>,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
    },
    /// Relight an image by distilling shading and lighting layers.
    Distill {
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        /// Base image (sRGB PNG).
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        direction: usize,
        #[arg(long)]
        category: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        reg_weight: Option<f64>,
    },
    /// Colorize a sketch by distilling an alpha-blended RGBA layer.
    Colorize {
        #[arg(long)]
        scorer: PathBuf,
        /// Image to colorize (sRGB PNG). Use --make-sketch to derive a sketch
        /// from a rendered image first.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        make_sketch: bool,
        #[arg(long)]
        category: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
    },
    /// Distill every held-out case and write the benchmark report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        /// Report path (`*.json`, per-case outputs go in a sibling directory
        /// named after it) or an output directory.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated direction indices, e.g. 0,3,6,9.
        #[arg(long, value_delimiter = ',')]
        directions: Option<Vec<usize>>,
        #[arg(long)]
        max_scenes: Option<usize>,
    },
    /// gen-data, train-scorer, train-adapter and eval in one run.
    Reproduce {
        #[arg(long)]
        out: PathBuf,
        /// Desk-scale preset: 200 scenes at 32x32, 12 held-out scenes.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Parser)]
#[command(
    name = "layerlight",
    version,
    about = "Layered score distillation for luminosity-only relighting.",
    long_about = "Layered score distillation for luminosity-only relighting.\n\n\
Settings resolve as built-in defaults, then the --config file, then LAYERLIGHT_SEED, then flags."
)]
struct Root {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn resolve(common: &Common, quick: bool) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None if quick => RunConfig::quick(),
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    if let Some(l) = &common.log_level {
        cfg.log_level = l.clone();
    }
    Ok(cfg)
}

fn init_logging(cfg: &RunConfig, explicit: bool) {
    let env = env_logger::Env::new().filter(LOG_ENV);
    let mut b = env_logger::Builder::new();
    b.parse_filters(&cfg.log_level);
    if !explicit {
        b.parse_env(env);
    }
    b.format_timestamp_secs().try_init().ok();
}

fn read_image(path: &Path) -> Result<layerlight_core::image::LinearImage> {
    pngio::read_linear_png(path)
}

fn run(root: Root) -> Result<()> {
    let quick = matches!(root.command, Command::Reproduce { quick: true, .. });
    let mut cfg = resolve(&root.common, quick)?;
    let force = root.common.force;
    init_logging(&cfg, root.common.log_level.is_some());

    match root.command {
        Command::GenData { out, num_scenes, size } => {
            if let Some(n) = num_scenes {
                cfg.data.num_scenes = n;
            }
            if let Some(s) = size {
                cfg.data.size = s;
            }
            generate_dataset(&cfg.data, &out, force)?;
            cfg.write_resolved(&out)?;
        }
        Command::TrainScorer { data, out, epochs, lr, batch } => {
            if let Some(e) = epochs {
                cfg.train_scorer.epochs = e;
            }
            if let Some(v) = lr {
                cfg.train_scorer.lr = v;
            }
            if let Some(b) = batch {
                cfg.train_scorer.batch = b;
            }
            let (_, r) = pipeline::stage_train_scorer(&cfg, &data, &out, force)?;
            log::info!("final loss {:.5}", r.loss_curve.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainAdapter { data, scorer, out, iters } => {
            if let Some(i) = iters {
                cfg.train_adapter.iters = i;
            }
            let (_, r) = pipeline::stage_train_adapter(&cfg, &data, &scorer, &out, force)?;
            log::info!("final loss {:.5}", r.loss_curve.last().copied().unwrap_or(f64::NAN));
        }
        Command::Sample { scorer, adapter, cond_image, direction, category, out, size, steps, cfg_scale } => {
            if out.exists() && !force {
                return Err(Error::AlreadyExists(out));
            }
            if let Some(s) = steps {
                cfg.sample.steps = s;
            }
            if let Some(s) = cfg_scale {
                cfg.sample.cfg_scale = s;
            }
            let (d, header) = load_denoiser(&scorer)?;
            let sched = header.schedule.build()?;
            let a = adapter.as_deref().map(load_adapter).transpose()?.map(|(a, _)| a);
            let ci = cond_image.as_deref().map(read_image).transpose()?;
            if ci.is_some() && a.is_none() {
                return Err(Error::Validation("--cond-image needs --adapter".into()));
            }
            let dims = match (&ci, size) {
                (Some(c), _) => (c.width(), c.height()),
                (None, Some(s)) => (s, s),
                (None, None) => (cfg.data.size, cfg.data.size),
            };
            let sc = Scorer::new(&d, a.as_ref());
            let img = sample(&sc, &sched, ConditionSpec { direction, category }, ci.as_ref(), dims, &cfg.sample)?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                cfg.write_resolved(dir)?;
            }
            pngio::write_linear_png(&out, &img)?;
        }
        Command::Distill { scorer, adapter, base, direction, category, out, iters, cfg_scale, reg_weight } => {
            if let Some(i) = iters {
                cfg.distill.iters = i;
            }
            if let Some(s) = cfg_scale {
                cfg.distill.cfg_scale = s;
            }
            if let Some(r) = reg_weight {
                cfg.distill.reg_weight = r;
            }
            prepare_out_dir(&out, force)?;
            cfg.write_resolved(&out)?;
            let (d, header) = load_denoiser(&scorer)?;
            let (a, _) = load_adapter(&adapter)?;
            let sched = header.schedule.build()?;
            let img = read_image(&base)?;
            let sc = Scorer::new(&d, Some(&a));
            let r = distill_relight(&img, direction, category, &sc, &sched, &cfg.distill)?;
            write_distill_outputs(&out, &r)?;
        }
        Command::Colorize { scorer, base, make_sketch: sketch, category, out, iters, cfg_scale } => {
            if let Some(i) = iters {
                cfg.colorize.iters = i;
            }
            if let Some(s) = cfg_scale {
                cfg.colorize.cfg_scale = s;
            }
            prepare_out_dir(&out, force)?;
            cfg.write_resolved(&out)?;
            let (d, header) = load_denoiser(&scorer)?;
            let sched = header.schedule.build()?;
            let mut img = read_image(&base)?;
            if sketch {
                img = make_sketch(&img)?;
                pngio::write_linear_png(&out.join("sketch.png"), &img)?;
            }
            let r = distill_colorize(&img, category, &d, &sched, &cfg.colorize, &EdgeMapRegularizer)?;
            pngio::write_rgba_png(&out.join("layer.png"), &r.layer)?;
            pngio::write_linear_png(&out.join("edited.png"), &r.edited)?;
            let p = out.join("trace.csv");
            fs::write(&p, trace_csv(&r.trace)).map_err(|e| Error::io(&p, e))?;
        }
        Command::Eval { data, scorer, adapter, out, directions, max_scenes } => {
            if max_scenes.is_some() {
                cfg.eval.max_scenes = max_scenes;
            }
            if let Some(d) = directions {
                cfg.eval.directions = d;
            }
            if out.extension().is_some_and(|e| e == "json") {
                if out.exists() && !force {
                    return Err(Error::AlreadyExists(out));
                }
                let dir = out.with_extension("");
                let report = pipeline::stage_eval(&cfg, &data, &scorer, &adapter, &dir, force)?;
                report.write(&out)?;
            } else {
                pipeline::stage_eval(&cfg, &data, &scorer, &adapter, &out, force)?;
            }
        }
        Command::Reproduce { out, .. } => {
            pipeline::reproduce(&cfg, &out, force)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let root = match Root::try_parse() {
        Ok(r) => r,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 2 {
                let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
                eprintln!("error: usage: {first}");
                eprintln!("{}", e.render().to_string().lines().skip(1).collect::<Vec<_>>().join("\n").trim());
            } else {
                e.print().ok();
            }
            return ExitCode::from(code);
        }
    };
    match run(root) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), e);
            ExitCode::from(1)
        }
    }
}
