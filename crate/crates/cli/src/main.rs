//! `tomoheight`: simulate → build-dataset → train/finetune → predict →
//! evaluate/experiment.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{ArgAction, Args, Parser, Subcommand};
use serde_json::json;

use tomoheight::baselines::{height_grid, BaselineOptions, Method, Spectrometer};
use tomoheight::covariance::covariance_features;
use tomoheight::dataset::{build_dataset, BuildOptions};
use tomoheight::experiment::{baseline_on_rect, references, run_experiment, NETWORK};
use tomoheight::simulation::{make_scene_with, ScatteringParams};
use tomoheight::tensor_io::{read_height_map, write_height_map};
use tomoheight::train::{
    evaluate, fine_tune, histogram_csv, metrics_csv, predict_map, train, EvalReport, TrainOptions,
};
use tomoheight::{
    feature_channel_count, load_config_with, load_scene, read_tensor, save_scene, select_polarizations, write_tensor,
    Dataset, Error, FeatureCube, Grid, ModelState, Rect, RunConfig, SceneInfo, Target, Tensor, TensorData,
};

#[derive(Parser)]
#[command(name = "tomoheight", version, about = "Forest height estimation from multi-baseline SAR stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration override, `dotted.key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (overrides `paths.output`).
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    /// Seed for simulation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to $TOMOHEIGHT_THREADS, then 1.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: stack, truth maps and scene.json.
    Simulate {
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Compute features and tile a scene into train/val/test patches.
    BuildDataset {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// chm, dtm or unified (sets `training.target`).
        #[arg(long)]
        target: Option<String>,
    },
    /// Beamforming and/or Capon ground and canopy maps.
    Baseline {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// beamforming, capon or both.
        #[arg(long, default_value = "both")]
        method: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        /// Also write the per-pixel spectra.
        #[arg(long)]
        spectra: bool,
        /// Only the held-out test rectangle.
        #[arg(long)]
        test_rect: bool,
    },
    /// Train a fresh network on a built dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Continue training a checkpoint on a new dataset.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Height maps from a checkpoint by tiled inference.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene directory; features are computed with the model's mode.
        #[arg(long, conflicts_with = "features")]
        scene: Option<PathBuf>,
        /// Precomputed feature cube (`.ten`, [rows, cols, M]).
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Score a checkpoint or a height map against a scene's truth.
    Evaluate {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, conflicts_with = "prediction")]
        checkpoint: Option<PathBuf>,
        /// Height map `.ten` to score instead of a checkpoint.
        #[arg(long, requires = "target")]
        prediction: Option<PathBuf>,
        /// chm or dtm, for `--prediction`.
        #[arg(long)]
        target: Option<String>,
        /// Method label in the metrics table.
        #[arg(long)]
        name: Option<String>,
        /// Score the whole scene instead of the test rectangle.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Full synthetic comparison on one simulated scene.
    Experiment {
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        size: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::BuildDataset { .. } => "build-dataset",
            Command::Baseline { .. } => "baseline",
            Command::Train { .. } => "train",
            Command::Finetune { .. } => "finetune",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Experiment { .. } => "experiment",
        }
    }

    /// Flags that stand for configuration keys, as overrides.
    fn overrides(&self) -> Vec<String> {
        let mut v = vec![];
        let mut push = |k: &str, val: Option<String>| {
            if let Some(val) = val {
                v.push(format!("{k}={val}"));
            }
        };
        match self {
            Command::Simulate { profile, size } | Command::Experiment { profile, size } => {
                push("simulation.profile", profile.clone());
                push("simulation.size", size.map(|s| s.to_string()));
            }
            Command::BuildDataset { target, .. } => push("training.target", target.clone()),
            Command::Baseline { alpha, beta, .. } => {
                push("baseline.alpha", alpha.map(|a| a.to_string()));
                push("baseline.beta", beta.map(|b| b.to_string()));
            }
            Command::Predict { overlap, .. } | Command::Evaluate { overlap, .. } => {
                push("experiment.overlap", overlap.map(|o| o.to_string()))
            }
            _ => {}
        }
        v
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match (cli.global.quiet, cli.global.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (_, 0) => log::LevelFilter::Info,
        (_, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .target(env_logger::Target::Stdout)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_validation));
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

fn threads(flag: Option<usize>) -> anyhow::Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("TOMOHEIGHT_THREADS") {
            Ok(s) => s.trim().parse().map_err(|_| Error::invalid("TOMOHEIGHT_THREADS", format!("`{s}` is not a count")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(Error::invalid("threads", "must be at least 1").into());
    }
    Ok(n)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let n_threads = threads(g.threads)?;
    rayon::ThreadPoolBuilder::new().num_threads(n_threads).build_global().context("starting the thread pool")?;
    let mut overrides = g.set.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("simulation.seed={s}"));
        overrides.push(format!("training.seed={s}"));
    }
    overrides.extend(cli.command.overrides());
    let cfg = load_config_with(g.config.as_deref(), &overrides)?;
    let out = g
        .output
        .clone()
        .or_else(|| cfg.paths.output.clone())
        .ok_or_else(|| Error::invalid("paths.output", "no output directory (use -o)"))?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = json!({
        "command": cli.command.name(),
        "argv": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "threads": n_threads,
        "seeds": { "simulation": cfg.simulation.seed, "training": cfg.training.seed },
        "config": serde_json::to_value(&cfg)?,
    });
    write_text(&out.join("run-manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    log::info!("{} → {}", cli.command.name(), out.display());
    match &cli.command {
        Command::Simulate { .. } => simulate(&cfg, &out),
        Command::BuildDataset { scene, .. } => build(&cfg, &input(scene, &cfg.paths.scene, "paths.scene")?, &out),
        Command::Baseline { scene, method, spectra, test_rect, .. } => {
            baseline(&cfg, &input(scene, &cfg.paths.scene, "paths.scene")?, method, *spectra, *test_rect, &out)
        }
        Command::Train { dataset } => train_cmd(&cfg, &input(dataset, &cfg.paths.dataset, "paths.dataset")?, &out),
        Command::Finetune { checkpoint, dataset } => finetune_cmd(
            &cfg,
            &input(checkpoint, &cfg.paths.checkpoint, "paths.checkpoint")?,
            &input(dataset, &cfg.paths.dataset, "paths.dataset")?,
            &out,
        ),
        Command::Predict { checkpoint, scene, features, .. } => {
            let state = ModelState::load(&input(checkpoint, &cfg.paths.checkpoint, "paths.checkpoint")?)?;
            let cube = match features {
                Some(f) => FeatureCube::from_tensor(read_tensor(f)?)?,
                None => scene_features(&cfg, &state, &input(scene, &cfg.paths.scene, "paths.scene")?)?.0,
            };
            predict_cmd(&cfg, &state, &cube, &out)
        }
        Command::Evaluate { scene, checkpoint, prediction, target, name, full, .. } => {
            let scene = input(scene, &cfg.paths.scene, "paths.scene")?;
            let source = match prediction {
                Some(p) => Source::Map(p.clone(), target.as_deref().unwrap_or("chm").parse()?),
                None => Source::Model(input(checkpoint, &cfg.paths.checkpoint, "paths.checkpoint")?),
            };
            evaluate_cmd(&cfg, &scene, source, name.as_deref(), *full, &out)
        }
        Command::Experiment { .. } => experiment_cmd(&cfg, &out),
    }
}

fn input(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, field: &str) -> anyhow::Result<PathBuf> {
    flag.clone().or_else(|| fallback.clone()).ok_or_else(|| Error::invalid(field, "input path not given").into())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn simulate(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let sim = &cfg.simulation;
    let (stack, truth) = make_scene_with(sim.profile, sim.size, sim.seed, &ScatteringParams::from_config(sim))?;
    let info = SceneInfo {
        profile: sim.profile,
        rows: stack.rows,
        cols: stack.cols,
        seed: sim.seed,
        mode: stack.mode,
        geometry: stack.geometry.clone(),
        vertical_wavenumbers: stack.geometry.vertical_wavenumbers(),
        extinction: truth.extinction,
        noise_power: truth.noise_power,
        simulation: sim.clone(),
    };
    save_scene(out, &stack, &truth, &info)?;
    log::info!("{} scene {}x{}, {} channels", sim.profile, stack.rows, stack.cols, stack.channels());
    Ok(())
}

/// Features of a stored scene in `mode`, checked against the configured
/// baseline count.
fn features_for(cfg: &RunConfig, scene: &Path, mode: tomoheight::PolMode) -> anyhow::Result<(FeatureCube, tomoheight::SceneTruth)> {
    let (stack, truth, _) = load_scene(scene)?;
    if stack.n_baselines() != cfg.baselines {
        return Err(Error::invalid(
            "baselines",
            format!("scene has {} baselines, config says {}", stack.n_baselines(), cfg.baselines),
        )
        .into());
    }
    let sub = select_polarizations(&stack, mode)?;
    let cube = covariance_features(&sub, cfg.window)?;
    log::info!("{mode} features: {} channels, window {}", cube.channels, cfg.window);
    Ok((cube, truth))
}

fn scene_features(cfg: &RunConfig, state: &ModelState, scene: &Path) -> anyhow::Result<(FeatureCube, tomoheight::SceneTruth)> {
    features_for(cfg, scene, state.mode)
}

fn test_rect(cfg: &RunConfig, rows: usize, cols: usize) -> anyhow::Result<Rect> {
    let t = cfg.experiment.test_size;
    if t > rows || t > cols {
        return Err(Error::invalid("experiment.test_size", format!("exceeds the {rows}x{cols} scene")).into());
    }
    Ok(Rect { r0: rows - t, c0: cols - t, h: t, w: t })
}

fn build(cfg: &RunConfig, scene: &Path, out: &Path) -> anyhow::Result<()> {
    let (cube, truth) = features_for(cfg, scene, cfg.mode)?;
    write_tensor(&cube.to_tensor(), out.join("features.ten"))?;
    let refs: Vec<(Target, &Grid<f64>)> = cfg
        .training
        .target
        .heads()
        .iter()
        .map(|t| (*t, if *t == Target::Chm { &truth.canopy } else { &truth.ground }))
        .collect();
    let data = build_dataset(
        &cube,
        &refs,
        &BuildOptions {
            quantizer: &cfg.quantizer,
            window: cfg.window,
            patch: cfg.patch,
            stride: cfg.stride(),
            test_rect: test_rect(cfg, cube.rows, cube.cols)?,
            seed: cfg.training.seed,
        },
    )?;
    data.save(out)?;
    let s = &data.splits;
    log::info!("{} train / {} val / {} test patches", s.train.len(), s.val.len(), s.test.len());
    Ok(())
}

fn baseline(cfg: &RunConfig, scene: &Path, method: &str, spectra: bool, only_test: bool, out: &Path) -> anyhow::Result<()> {
    let methods = match method {
        "both" => vec![Method::Beamforming, Method::Capon],
        m => vec![m.parse::<Method>()?],
    };
    let (stack, _, _) = load_scene(scene)?;
    let stack = select_polarizations(&stack, cfg.mode)?;
    let b = &cfg.baseline;
    let opts = BaselineOptions { z: height_grid(b.z_min, b.z_max, b.dz)?, loading: b.loading, alpha: b.alpha, beta: b.beta };
    let rect = if only_test { test_rect(cfg, stack.rows, stack.cols)? } else { Rect { r0: 0, c0: 0, h: stack.rows, w: stack.cols } };
    for m in methods {
        let (ground, canopy, failures) = baseline_on_rect(&stack, rect, cfg.window, m, &opts)?;
        if failures > 0 {
            log::warn!("{}: no peak in {failures} pixels", m.name());
        }
        write_height_map(&ground, &format!("{}_ground", m.name()), out.join(format!("{}_ground.ten", m.name())))?;
        write_height_map(&canopy, &format!("{}_canopy", m.name()), out.join(format!("{}_canopy.ten", m.name())))?;
        if spectra {
            let covs = tomoheight::baselines::single_pol_covariances(&stack, cfg.window)?;
            let sp = Spectrometer::new(&stack.geometry, opts.z.clone())?;
            let nz = opts.z.len();
            let mut data = Vec::with_capacity(rect.h * rect.w * nz);
            for r in rect.r0..rect.r0 + rect.h {
                for c in rect.c0..rect.c0 + rect.w {
                    data.extend(sp.spectrum(m, &covs[r * stack.cols + c], b.loading)?.power);
                }
            }
            let t = Tensor::new(vec![rect.h, rect.w, nz], TensorData::Real64(data))?
                .with_name(format!("{}_spectra", m.name()))
                .with_units("power");
            write_tensor(&t, out.join(format!("{}_spectra.ten", m.name())))?;
            let z = Tensor::new(vec![nz], TensorData::Real64(opts.z.clone()))?.with_name("height_grid").with_units("m");
            write_tensor(&z, out.join("height_grid.ten"))?;
        }
        log::info!("{} maps written", m.name());
    }
    Ok(())
}

fn check_mode(cfg: &RunConfig, data: &Dataset) -> anyhow::Result<()> {
    let expected = feature_channel_count(cfg.mode.phi(), cfg.baselines);
    if data.channels() != expected {
        return Err(Error::invalid(
            "mode",
            format!("{} with {} baselines needs {expected} channels, dataset has {}", cfg.mode, cfg.baselines, data.channels()),
        )
        .into());
    }
    Ok(())
}

fn save_trained(state: &ModelState, report: &tomoheight::TrainReport, out: &Path) -> anyhow::Result<()> {
    state.save(&out.join("model"))?;
    write_text(&out.join("training.csv"), &report.to_csv())?;
    if let Some(e) = report.best_epoch {
        log::info!("kept epoch {e} (validation loss {:.4})", report.rows[e].val_loss);
    }
    Ok(())
}

fn diverged(e: Error, out: &Path) -> anyhow::Error {
    if let Error::Diverged { last_good, .. } = &e {
        let dir = out.join("last-good");
        match last_good.save(&dir) {
            Ok(()) => log::warn!("last good checkpoint written to {}", dir.display()),
            Err(s) => log::warn!("could not save the last good checkpoint: {s}"),
        }
    }
    e.into()
}

fn train_cmd(cfg: &RunConfig, dataset: &Path, out: &Path) -> anyhow::Result<()> {
    let data = Dataset::load(dataset)?;
    check_mode(cfg, &data)?;
    let (state, report) =
        train(&data, &cfg.network, &TrainOptions::from_config(&cfg.training), cfg.mode).map_err(|e| diverged(e, out))?;
    save_trained(&state, &report, out)
}

fn finetune_cmd(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, out: &Path) -> anyhow::Result<()> {
    let pre = ModelState::load(checkpoint)?;
    let data = Dataset::load(dataset)?;
    let opts = TrainOptions::finetune_from_config(&cfg.training);
    log::info!("fine-tuning from {} at lr {}", checkpoint.display(), opts.lr);
    let (state, report) = fine_tune(&pre, &data, &opts).map_err(|e| diverged(e, out))?;
    save_trained(&state, &report, out)
}

fn overlap(cfg: &RunConfig, tile: usize) -> usize {
    cfg.experiment.overlap.unwrap_or(tile / 2)
}

fn predict_cmd(cfg: &RunConfig, state: &ModelState, cube: &FeatureCube, out: &Path) -> anyhow::Result<()> {
    let tile = cfg.patch;
    let maps = predict_map(state, cube, tile, overlap(cfg, tile))?;
    for (t, m) in state.targets.iter().zip(&maps) {
        write_height_map(m, t.name(), out.join(format!("{t}.ten")))?;
        log::info!("{t} map {}x{} written", m.rows, m.cols);
    }
    Ok(())
}

enum Source {
    Model(PathBuf),
    Map(PathBuf, Target),
}

fn evaluate_cmd(cfg: &RunConfig, scene: &Path, source: Source, name: Option<&str>, full: bool, out: &Path) -> anyhow::Result<()> {
    let (stack, truth, _) = load_scene(scene)?;
    let (rows, cols) = (stack.rows, stack.cols);
    drop(stack);
    let rect = if full { Rect { r0: 0, c0: 0, h: rows, w: cols } } else { test_rect(cfg, rows, cols)? };
    let (chm, dtm) = references(&truth, cfg.window)?;
    let reference = |t: Target| {
        let g = if t == Target::Chm { &chm } else { &dtm };
        g.crop(rect.r0, rect.c0, rect.h, rect.w)
    };
    let mut reports: Vec<EvalReport> = vec![];
    let mut hists = vec![];
    match source {
        Source::Model(dir) => {
            let state = ModelState::load(&dir)?;
            let (cube, _) = scene_features(cfg, &state, scene)?;
            let cube = cube.crop(rect.r0, rect.c0, rect.h, rect.w);
            let maps = predict_map(&state, &cube, cfg.patch, overlap(cfg, cfg.patch))?;
            let method = name.unwrap_or(NETWORK);
            for ((t, q), m) in state.targets.iter().zip(&state.quantizers).zip(&maps) {
                let r = evaluate(method, *t, state.mode, m, &reference(*t), q, None)?;
                hists.push((format!("{method}_{t}_{}", state.mode), histogram_csv(&r.histogram, q)));
                write_height_map(m, t.name(), out.join("maps").join(format!("{method}_{t}.ten")))?;
                reports.push(r);
            }
        }
        Source::Map(path, target) => {
            if target == Target::Unified {
                bail!(Error::invalid("target", "a single map is either chm or dtm"));
            }
            let map = read_height_map(&path)?;
            let map = if map.rows == rows && map.cols == cols && !full {
                map.crop(rect.r0, rect.c0, rect.h, rect.w)
            } else {
                map
            };
            let refm = reference(target);
            if !map.same_shape(&refm) {
                return Err(anyhow!(Error::Shape(format!(
                    "map is {}x{}, evaluation region is {}x{}",
                    map.rows, map.cols, refm.rows, refm.cols
                ))));
            }
            let q = tomoheight::HeightQuantizer::from_range(
                refm.data.iter().cloned().fold(f64::INFINITY, f64::min),
                refm.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                &cfg.quantizer,
            )?;
            let method = name.unwrap_or("map");
            let r = evaluate(method, target, cfg.mode, &map, &refm, &q, None)?;
            hists.push((format!("{method}_{target}_{}", cfg.mode), histogram_csv(&r.histogram, &q)));
            reports.push(r);
        }
    }
    for (n, h) in hists {
        write_text(&out.join("histograms").join(format!("{n}.csv")), &h)?;
    }
    let csv = metrics_csv(&reports);
    write_text(&out.join("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn experiment_cmd(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let run = run_experiment(cfg)?;
    run.save(out)?;
    print!("{}", run.metrics_csv());
    Ok(())
}
