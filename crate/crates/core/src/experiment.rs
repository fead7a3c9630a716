//! End-to-end synthetic comparison: U-Net models against beamforming and
//! Capon on the held-out corner of one simulated scene.

use std::path::Path;

use serde::Serialize;

use crate::baselines::{baseline_heights, height_grid, BaselineOptions, Method};
use crate::config::{RunConfig, Target};
use crate::covariance::{covariance_features, select_polarizations, FeatureCube, TomoStack};
use crate::dataset::{average_reference, build_dataset, BuildOptions, Dataset, HeightQuantizer, Rect};
use crate::error::{Error, Result};
use crate::nn::ModelState;
use crate::polarization::PolMode;
use crate::raster::Grid;
use crate::simulation::{make_scene_with, ScatteringParams, SceneTruth};
use crate::tensor_io::write_height_map;
use crate::train::{evaluate, histogram_csv, metrics_csv, predict_map, train, EvalReport, TrainOptions, TrainReport};

pub const NETWORK: &str = "unet";
pub const NETWORK_UNIFIED: &str = "unet-unified";

pub struct TrainedModel {
    pub mode: PolMode,
    pub target: Target,
    pub state: ModelState,
    pub report: TrainReport,
}

impl TrainedModel {
    pub fn name(&self) -> String {
        format!("{}_{}", self.mode, self.target)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub profile: String,
    pub scene_size: usize,
    pub simulation_seed: u64,
    pub training_seed: u64,
    pub test_rect: Rect,
    /// Feature channel count per polarization mode.
    pub feature_dims: Vec<(PolMode, usize)>,
    /// Height search grid of the classical estimators: (z_min, z_max, dz).
    pub height_grid: (f64, f64, f64),
    /// Pixels where a classical estimator found no peak, per method and mode.
    pub baseline_failures: Vec<(String, PolMode, usize)>,
    pub best_epochs: Vec<(String, Option<usize>)>,
}

pub struct ExperimentRun {
    pub reports: Vec<EvalReport>,
    pub quantizers: Vec<(Target, HeightQuantizer)>,
    pub models: Vec<TrainedModel>,
    /// Predicted test-rectangle maps keyed `method_target_mode`.
    pub maps: Vec<(String, Grid<f64>)>,
    pub summary: ExperimentSummary,
}

/// Window-averaged CHM and DTM references of the whole scene.
pub fn references(truth: &SceneTruth, window: usize) -> Result<(Grid<f64>, Grid<f64>)> {
    Ok((average_reference(&truth.canopy, window)?, average_reference(&truth.ground, window)?))
}

/// Beamforming or Capon ground and canopy maps of the test rectangle. The
/// covariance windows may reach into the surrounding scene.
pub fn baseline_on_rect(
    stack: &TomoStack,
    rect: Rect,
    window: usize,
    method: Method,
    opts: &BaselineOptions,
) -> Result<(Grid<f64>, Grid<f64>, usize)> {
    let m = window / 2;
    let (r0, c0) = (rect.r0.saturating_sub(m), rect.c0.saturating_sub(m));
    let r1 = (rect.r0 + rect.h + m).min(stack.rows);
    let c1 = (rect.c0 + rect.w + m).min(stack.cols);
    let sub = stack.crop(r0, c0, r1 - r0, c1 - c0);
    let maps = baseline_heights(&sub, window, method, opts)?;
    let (dr, dc) = (rect.r0 - r0, rect.c0 - c0);
    let ground = maps.ground.crop(dr, dc, rect.h, rect.w);
    let canopy = maps.canopy.crop(dr, dc, rect.h, rect.w);
    let failures = ground.data.iter().filter(|v| v.is_nan()).count();
    Ok((ground, canopy, failures))
}

fn build(cube: &FeatureCube, refs: &[(Target, &Grid<f64>)], cfg: &RunConfig, rect: Rect) -> Result<Dataset> {
    build_dataset(
        cube,
        refs,
        &BuildOptions {
            quantizer: &cfg.quantizer,
            window: cfg.window,
            patch: cfg.patch,
            stride: cfg.stride(),
            test_rect: rect,
            seed: cfg.training.seed,
        },
    )
}

/// Runs the whole comparison described by `cfg`: one simulated scene, and
/// for every configured polarization mode a CHM and a DTM network, the
/// unified network (full polarization only) and both classical estimators.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let sim = &cfg.simulation;
    let params = ScatteringParams::from_config(sim);
    log::info!("simulating {} scene {}x{} (seed {})", sim.profile.name(), sim.size, sim.size, sim.seed);
    let (stack, truth) = make_scene_with(sim.profile, sim.size, sim.seed, &params)?;
    if stack.n_baselines() != cfg.baselines {
        return Err(Error::invalid(
            "baselines",
            format!("profile has {} baselines, config says {}", stack.n_baselines(), cfg.baselines),
        ));
    }
    let rect = Rect::lower_right(sim.size, sim.size, cfg.experiment.test_size);
    let (chm_raw, dtm_raw) = (&truth.canopy, &truth.ground);
    let (chm, dtm) = references(&truth, cfg.window)?;
    let chm_test = chm.crop(rect.r0, rect.c0, rect.h, rect.w);
    let dtm_test = dtm.crop(rect.r0, rect.c0, rect.h, rect.w);
    let (z_min, z_max, dz) = (cfg.baseline.z_min, cfg.baseline.z_max, cfg.baseline.dz);
    let bopts = BaselineOptions {
        z: height_grid(z_min, z_max, dz)?,
        loading: cfg.baseline.loading,
        alpha: cfg.baseline.alpha,
        beta: cfg.baseline.beta,
    };
    let opts = TrainOptions::from_config(&cfg.training);
    let overlap = cfg.experiment.overlap.unwrap_or(cfg.patch / 2);
    let mut run = ExperimentRun {
        reports: vec![],
        quantizers: vec![],
        models: vec![],
        maps: vec![],
        summary: ExperimentSummary {
            profile: sim.profile.name().to_string(),
            scene_size: sim.size,
            simulation_seed: sim.seed,
            training_seed: cfg.training.seed,
            test_rect: rect,
            feature_dims: vec![],
            height_grid: (z_min, z_max, dz),
            baseline_failures: vec![],
            best_epochs: vec![],
        },
    };
    let reference = |t: Target| if t == Target::Chm { &chm_test } else { &dtm_test };
    for &mode in &cfg.experiment.modes {
        let sub = select_polarizations(&stack, mode)?;
        let cube = covariance_features(&sub, cfg.window)?;
        log::info!("{mode}: {} feature channels", cube.channels);
        run.summary.feature_dims.push((mode, cube.channels));
        let test_cube = cube.crop(rect.r0, rect.c0, rect.h, rect.w);
        let mut jobs: Vec<Vec<(Target, &Grid<f64>)>> = vec![vec![(Target::Chm, chm_raw)], vec![(Target::Dtm, dtm_raw)]];
        if cfg.experiment.unified && mode == PolMode::FP {
            jobs.push(vec![(Target::Chm, chm_raw), (Target::Dtm, dtm_raw)]);
        }
        for refs in jobs {
            let data = build(&cube, &refs, cfg, rect)?;
            let (target, method) = match refs.len() {
                1 => (refs[0].0, NETWORK),
                _ => (Target::Unified, NETWORK_UNIFIED),
            };
            log::info!(
                "{mode} {target}: {} train / {} val patches, classes {:?}",
                data.splits.train.len(),
                data.splits.val.len(),
                data.quantizers.iter().map(|q| q.k).collect::<Vec<_>>()
            );
            for (t, q) in data.targets.iter().zip(&data.quantizers) {
                if !run.quantizers.iter().any(|(u, _)| u == t) {
                    run.quantizers.push((*t, q.clone()));
                }
            }
            let (state, report) = train(&data, &cfg.network, &opts, mode)?;
            let maps = predict_map(&state, &test_cube, cfg.patch, overlap)?;
            for ((t, q), map) in data.targets.iter().zip(&data.quantizers).zip(maps) {
                run.reports.push(evaluate(method, *t, mode, &map, reference(*t), q, None)?);
                run.maps.push((format!("{method}_{t}_{mode}"), map));
            }
            let model = TrainedModel { mode, target, state, report };
            run.summary.best_epochs.push((model.name(), model.report.best_epoch));
            run.models.push(model);
        }
        for method in [Method::Beamforming, Method::Capon] {
            log::info!("{mode}: {} on the test rectangle", method.name());
            let (ground, canopy, failures) = baseline_on_rect(&sub, rect, cfg.window, method, &bopts)?;
            run.summary.baseline_failures.push((method.name().to_string(), mode, failures));
            for (t, map) in [(Target::Chm, canopy), (Target::Dtm, ground)] {
                let q = &run.quantizers.iter().find(|(u, _)| *u == t).expect("quantizer built above").1;
                run.reports.push(evaluate(method.name(), t, mode, &map, reference(t), q, None)?);
                run.maps.push((format!("{}_{t}_{mode}", method.name()), map));
            }
        }
    }
    Ok(run)
}

impl ExperimentRun {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.reports)
    }

    pub fn report(&self, method: &str, target: Target, mode: PolMode) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.method == method && r.target == target && r.mode == mode)
    }

    /// Writes `metrics.csv`, `experiment.json`, `histograms/*.csv`,
    /// `maps/*.ten`, `training/*.csv` and one checkpoint per model under
    /// `models/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let write = |rel: &str, text: String| {
            let path = dir.join(rel);
            if let Some(p) = path.parent() {
                std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
            }
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write("metrics.csv", self.metrics_csv())?;
        write("experiment.json", serde_json::to_string_pretty(&self.summary).expect("summary serializes"))?;
        for r in &self.reports {
            let q = &self.quantizers.iter().find(|(t, _)| *t == r.target).expect("quantizer per target").1;
            write(&format!("histograms/{}_{}_{}.csv", r.method, r.target, r.mode), histogram_csv(&r.histogram, q))?;
        }
        for (name, map) in &self.maps {
            write_height_map(map, name, dir.join("maps").join(format!("{name}.ten")))?;
        }
        for m in &self.models {
            write(&format!("training/{}.csv", m.name()), m.report.to_csv())?;
            m.state.save(&dir.join("models").join(m.name()))?;
        }
        Ok(())
    }
}
