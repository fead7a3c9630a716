use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{forward, xavier_params, UNetConfig};
use crate::config::Target;
use crate::covariance::FeatureStats;
use crate::dataset::HeightQuantizer;
use crate::error::{Error, Result};
use crate::polarization::PolMode;
use crate::tensor_io::{read_tensor, write_tensor, Tensor, TensorData};

/// Network parameters with the optimizer state and everything needed to
/// turn raw features into heights.
#[derive(Clone, PartialEq)]
pub struct ModelState {
    pub config: UNetConfig,
    pub params: Vec<Vec<f32>>,
    pub velocity: Vec<Vec<f32>>,
    pub targets: Vec<Target>,
    pub quantizers: Vec<HeightQuantizer>,
    pub stats: FeatureStats,
    pub mode: PolMode,
    pub epoch: usize,
    pub seed: u64,
}

impl fmt::Debug for ModelState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelState")
            .field("config", &self.config)
            .field("parameters", &self.config.param_count())
            .field("targets", &self.targets)
            .field("quantizers", &self.quantizers)
            .field("mode", &self.mode)
            .field("epoch", &self.epoch)
            .field("seed", &self.seed)
            .finish()
    }
}

/// Xavier-initialized state with zero momentum and placeholder task
/// metadata (unit-step quantizers from 0 m, identity statistics).
pub fn xavier_init(config: &UNetConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let params: Vec<Vec<f32>> = xavier_params(config, seed);
    let velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    let targets = match config.classes.len() {
        1 => vec![Target::Chm],
        _ => vec![Target::Chm, Target::Dtm],
    };
    let quantizers = config
        .classes
        .iter()
        .map(|k| HeightQuantizer::new(0.0, 1.0, *k))
        .collect::<Result<_>>()?;
    Ok(ModelState {
        config: config.clone(),
        params,
        velocity,
        targets,
        quantizers,
        stats: FeatureStats::identity(config.in_channels),
        mode: PolMode::FP,
        epoch: 0,
        seed,
    })
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: UNetConfig,
    targets: Vec<Target>,
    quantizers: Vec<HeightQuantizer>,
    mode: PolMode,
    epoch: usize,
    seed: u64,
    parameters: Vec<TensorEntry>,
}

impl ModelState {
    pub fn param_names(&self) -> Vec<String> {
        self.config.param_shapes().into_iter().map(|(n, _)| n).collect()
    }

    /// Logits for an already normalized NHWC batch.
    pub fn forward(&self, batch: &[f32], n: usize, size: usize) -> Result<Vec<f32>> {
        forward(&self.config, &self.params, batch, n, size)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (p, name) in self.params.iter().zip(self.param_names()) {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        Ok(())
    }

    /// Writes `params/<name>.ten`, `velocity/<name>.ten`, `stats_mean.ten`,
    /// `stats_std.ten` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let shapes = self.config.param_shapes();
        for ((name, shape), (p, v)) in shapes.iter().zip(self.params.iter().zip(&self.velocity)) {
            let t = Tensor::new(shape.clone(), TensorData::Real32(p.clone()))?.with_name(name.clone());
            write_tensor(&t, dir.join("params").join(format!("{name}.ten")))?;
            let t = Tensor::new(shape.clone(), TensorData::Real32(v.clone()))?.with_name(format!("{name}.velocity"));
            write_tensor(&t, dir.join("velocity").join(format!("{name}.ten")))?;
        }
        let m = self.stats.mean.len();
        write_tensor(
            &Tensor::new(vec![m], TensorData::Real64(self.stats.mean.clone()))?.with_name("feature_mean"),
            dir.join("stats_mean.ten"),
        )?;
        write_tensor(
            &Tensor::new(vec![m], TensorData::Real64(self.stats.std.clone()))?.with_name("feature_std"),
            dir.join("stats_std.ten"),
        )?;
        let manifest = Manifest {
            config: self.config.clone(),
            targets: self.targets.clone(),
            quantizers: self.quantizers.clone(),
            mode: self.mode,
            epoch: self.epoch,
            seed: self.seed,
            parameters: shapes.into_iter().map(|(name, shape)| TensorEntry { name, shape }).collect(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |reason: String| Error::Metadata { path: path.clone(), reason };
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        manifest.config.validate()?;
        let shapes = manifest.config.param_shapes();
        if shapes.len() != manifest.parameters.len()
            || shapes.iter().zip(&manifest.parameters).any(|((n, s), e)| *n != e.name || *s != e.shape)
        {
            return Err(bad("parameter list disagrees with the network config".into()));
        }
        let read = |sub: &str, name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let t = read_tensor(dir.join(sub).join(format!("{name}.ten")))?;
            if t.shape != shape {
                return Err(bad(format!("{sub}/{name} has shape {:?}", t.shape)));
            }
            match t.data {
                TensorData::Real32(v) => Ok(v),
                other => Err(Error::UnsupportedDtype(format!("{:?} parameter", other.dtype()))),
            }
        };
        let mut params = vec![];
        let mut velocity = vec![];
        for (name, shape) in &shapes {
            params.push(read("params", name, shape)?);
            velocity.push(read("velocity", name, shape)?);
        }
        let (_, mean) = read_tensor(dir.join("stats_mean.ten"))?.into_f64()?;
        let (_, std) = read_tensor(dir.join("stats_std.ten"))?.into_f64()?;
        if mean.len() != manifest.config.in_channels || std.len() != mean.len() {
            return Err(bad("feature statistics do not match the input channels".into()));
        }
        if manifest.quantizers.len() != manifest.config.classes.len()
            || manifest.quantizers.iter().zip(&manifest.config.classes).any(|(q, k)| q.k != *k)
            || manifest.targets.len() != manifest.quantizers.len()
        {
            return Err(bad("quantizers disagree with the class groups".into()));
        }
        Ok(ModelState {
            config: manifest.config,
            params,
            velocity,
            targets: manifest.targets,
            quantizers: manifest.quantizers,
            stats: FeatureStats { mean, std },
            mode: manifest.mode,
            epoch: manifest.epoch,
            seed: manifest.seed,
        })
    }
}
