//! Synthetic Pol-TomoSAR scenes: acquisition geometry, random-volume-over-
//! ground covariances, speckle sampling and scene generation.

mod geometry;
mod model;
mod sampler;
mod scene;

pub use geometry::{steering_vector, AcquisitionGeometry};
pub use model::{
    extinction_from_db, pixel_covariance_truth, volume_profile, ScatteringParams, TruthPixel,
    VOLUME_STEP,
};
pub use sampler::{
    complex_normal, pixel_rng, psd_factor, relative_frobenius, sample_covariance, sample_stack,
};
pub use scene::{make_scene, make_scene_with, make_truth, simulate_stack, Profile, SceneTruth};

use crate::config::SimulationConfig;

impl ScatteringParams {
    pub fn from_config(cfg: &SimulationConfig) -> Self {
        ScatteringParams {
            rho_copol: cfg.rho_copol,
            rho_crosspol: cfg.rho_crosspol,
            extinction: extinction_from_db(cfg.extinction_db_per_m),
            noise_power: cfg.noise_power,
            decorrelation: cfg.decorrelation.clone(),
            ..ScatteringParams::default()
        }
    }
}

/// Contents of `scene.json`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneInfo {
    pub profile: Profile,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub mode: crate::polarization::PolMode,
    pub geometry: AcquisitionGeometry,
    pub vertical_wavenumbers: Vec<f64>,
    pub extinction: f64,
    pub noise_power: f64,
    pub simulation: SimulationConfig,
}

const TRUTH_MAPS: [&str; 4] = ["ground", "canopy", "ground_power", "volume_power"];

fn truth_maps(truth: &SceneTruth) -> [&crate::raster::Grid<f64>; 4] {
    [&truth.ground, &truth.canopy, &truth.ground_power, &truth.volume_power]
}

/// Writes `stack.ten`, one real64 `.ten` per truth map and `scene.json`.
pub fn save_scene(dir: &std::path::Path, stack: &crate::covariance::TomoStack, truth: &SceneTruth, info: &SceneInfo) -> crate::Result<()> {
    use crate::tensor_io::{write_tensor, Tensor, TensorData};
    write_tensor(&stack.to_tensor(), dir.join("stack.ten"))?;
    for (name, g) in TRUTH_MAPS.iter().zip(truth_maps(truth)) {
        let units = if name.ends_with("power") { "power" } else { "m" };
        let t = Tensor::new(vec![g.rows, g.cols], TensorData::Real64(g.data.clone()))?.with_name(*name).with_units(units);
        write_tensor(&t, dir.join(format!("{name}.ten")))?;
    }
    let path = dir.join("scene.json");
    std::fs::write(&path, serde_json::to_string_pretty(info).expect("scene info serializes"))
        .map_err(|e| crate::Error::io(&path, e))
}

pub fn load_scene(dir: &std::path::Path) -> crate::Result<(crate::covariance::TomoStack, SceneTruth, SceneInfo)> {
    use crate::raster::Grid;
    use crate::tensor_io::read_tensor;
    let path = dir.join("scene.json");
    let text = std::fs::read_to_string(&path).map_err(|e| crate::Error::io(&path, e))?;
    let info: SceneInfo =
        serde_json::from_str(&text).map_err(|e| crate::Error::Metadata { path: path.clone(), reason: e.to_string() })?;
    let stack = crate::covariance::TomoStack::from_tensor(read_tensor(dir.join("stack.ten"))?, info.mode, info.geometry.clone())?;
    let mut maps = vec![];
    for name in TRUTH_MAPS {
        let (shape, data) = read_tensor(dir.join(format!("{name}.ten")))?.into_f64()?;
        if shape != [stack.rows, stack.cols] {
            return Err(crate::Error::Shape(format!("{name} map is {shape:?}, stack is {}x{}", stack.rows, stack.cols)));
        }
        maps.push(Grid::from_vec(stack.rows, stack.cols, data)?);
    }
    let mut it = maps.into_iter();
    let mut next = || it.next().expect("four maps");
    let truth = SceneTruth {
        ground: next(),
        canopy: next(),
        ground_power: next(),
        volume_power: next(),
        extinction: info.extinction,
        noise_power: info.noise_power,
    };
    Ok((stack, truth, info))
}

#[cfg(test)]
mod io_tests {
    use super::*;

    #[test]
    fn scene_round_trip() {
        let cfg = SimulationConfig { size: 12, seed: 4, ..SimulationConfig::default() };
        let params = ScatteringParams::from_config(&cfg);
        let (stack, truth) = make_scene_with(cfg.profile, cfg.size, cfg.seed, &params).unwrap();
        let info = SceneInfo {
            profile: cfg.profile,
            rows: 12,
            cols: 12,
            seed: 4,
            mode: stack.mode,
            geometry: stack.geometry.clone(),
            vertical_wavenumbers: stack.geometry.vertical_wavenumbers(),
            extinction: truth.extinction,
            noise_power: truth.noise_power,
            simulation: cfg,
        };
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &stack, &truth, &info).unwrap();
        let (s2, t2, i2) = load_scene(dir.path()).unwrap();
        assert_eq!(s2.data, stack.data);
        assert_eq!(t2, truth);
        assert_eq!(i2, info);
    }
}
