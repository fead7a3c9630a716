//! Run configuration: one JSON document, unknown keys rejected, every
//! missing field filled with its default.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::polarization::PolMode;
use crate::simulation::Profile;

/// What a network head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// Canopy height above ground.
    #[default]
    Chm,
    /// Ground elevation.
    Dtm,
    /// Both heads at once, CHM first.
    Unified,
}

impl Target {
    /// The single-map targets a model trained for `self` predicts, in head order.
    pub fn heads(self) -> &'static [Target] {
        match self {
            Target::Chm => &[Target::Chm],
            Target::Dtm => &[Target::Dtm],
            Target::Unified => &[Target::Chm, Target::Dtm],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Chm => "chm",
            Target::Dtm => "dtm",
            Target::Unified => "unified",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "chm" => Ok(Target::Chm),
            "dtm" => Ok(Target::Dtm),
            "unified" => Ok(Target::Unified),
            _ => Err(Error::invalid("training.target", format!("unknown target `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    /// Lower edge of class 0; derived from the training reference when absent.
    pub h_min: Option<f64>,
    pub step: f64,
    /// Class count; derived from the training reference range when absent.
    #[serde(rename = "K")]
    pub k: Option<usize>,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            h_min: None,
            step: 1.0,
            k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub levels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 32,
            levels: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub target: Target,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub seed: u64,
    /// Fine-tuning starts from `lr * finetune_lr_scale`.
    pub finetune_lr_scale: f64,
    /// Epoch budget for fine-tuning; `epochs` when absent.
    pub finetune_epochs: Option<usize>,
    pub normalize: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            target: Target::Chm,
            lr: 0.01,
            momentum: 0.9,
            batch: 64,
            epochs: 600,
            decay_factor: 0.5,
            decay_period: 200,
            seed: 0,
            finetune_lr_scale: 0.1,
            finetune_epochs: None,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub z_min: f64,
    pub z_max: f64,
    pub dz: f64,
    /// Capon diagonal loading relative to the mean eigenvalue.
    pub loading: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            z_min: -10.0,
            z_max: 80.0,
            dz: 0.5,
            loading: 1e-3,
            alpha: 0.25,
            beta: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub profile: Profile,
    pub size: usize,
    pub seed: u64,
    pub rho_copol: f64,
    pub rho_crosspol: f64,
    pub extinction_db_per_m: f64,
    /// Noise power relative to a unit ground return.
    pub noise_power: f64,
    /// Optional per-baseline temporal coherence factors in [0, 1].
    pub decorrelation: Option<Vec<f64>>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            profile: Profile::ParacouLike,
            size: 512,
            seed: 0,
            rho_copol: 0.8,
            rho_crosspol: 0.4,
            extinction_db_per_m: 0.1,
            noise_power: 0.05,
            decorrelation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Side of the square test rectangle held out in the scene's lower-right corner.
    pub test_size: usize,
    pub modes: Vec<PolMode>,
    /// Also train the joint CHM+DTM model (full polarization only).
    pub unified: bool,
    /// Tile overlap for inference; `patch / 2` when absent.
    pub overlap: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            test_size: 256,
            modes: vec![PolMode::FP, PolMode::HHVV, PolMode::HH],
            unified: true,
            overlap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub scene: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: PolMode,
    /// Number of baselines (N).
    pub baselines: usize,
    /// Side of the square spatial averaging window (odd).
    pub window: usize,
    /// Patch side W.
    pub patch: usize,
    /// Training tile stride; `patch` when absent.
    pub stride: Option<usize>,
    pub quantizer: QuantizerConfig,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub baseline: BaselineConfig,
    pub simulation: SimulationConfig,
    pub experiment: ExperimentConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: PolMode::FP,
            baselines: 6,
            window: 9,
            patch: 64,
            stride: None,
            quantizer: QuantizerConfig::default(),
            network: NetworkConfig::default(),
            training: TrainingConfig::default(),
            baseline: BaselineConfig::default(),
            simulation: SimulationConfig::default(),
            experiment: ExperimentConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn check(ok: bool, field: &str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(field, reason))
    }
}

impl RunConfig {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        check(self.baselines >= 1, "baselines", "must be at least 1")?;
        check(self.window % 2 == 1, "window", "must be odd and at least 1")?;
        check(self.patch > 0, "patch", "must be positive")?;
        check(self.stride() >= 1, "stride", "must be at least 1")?;
        let q = &self.quantizer;
        check(q.step > 0.0 && q.step.is_finite(), "quantizer.step", "must be positive")?;
        if let Some(k) = q.k {
            check(k >= 2, "quantizer.K", "must be at least 2")?;
        }
        if let Some(h) = q.h_min {
            check(h.is_finite(), "quantizer.h_min", "must be finite")?;
        }
        let n = &self.network;
        check(n.levels >= 2, "network.levels", "must be at least 2")?;
        check(n.base_channels >= 1, "network.base_channels", "must be at least 1")?;
        let div = 1usize << (n.levels - 1);
        check(
            self.patch % div == 0,
            "patch",
            &format!("must be divisible by 2^(levels-1) = {div}"),
        )?;
        let t = &self.training;
        check(t.lr > 0.0 && t.lr.is_finite(), "training.lr", "must be positive")?;
        check((0.0..1.0).contains(&t.momentum), "training.momentum", "must be in [0, 1)")?;
        check(t.batch >= 1, "training.batch", "must be at least 1")?;
        check(
            t.decay_factor > 0.0 && t.decay_factor <= 1.0,
            "training.decay_factor",
            "must be in (0, 1]",
        )?;
        check(t.decay_period >= 1, "training.decay_period", "must be at least 1")?;
        check(
            t.finetune_lr_scale > 0.0,
            "training.finetune_lr_scale",
            "must be positive",
        )?;
        let b = &self.baseline;
        check(b.dz > 0.0, "baseline.dz", "must be positive")?;
        check(b.z_max > b.z_min, "baseline.z_max", "must exceed baseline.z_min")?;
        check(b.loading >= 0.0, "baseline.loading", "must be non-negative")?;
        check((0.0..=1.0).contains(&b.alpha), "baseline.alpha", "must be in [0, 1]")?;
        check((0.0..=1.0).contains(&b.beta), "baseline.beta", "must be in [0, 1]")?;
        let s = &self.simulation;
        check(s.size >= self.patch, "simulation.size", "must be at least the patch size")?;
        check((0.0..=1.0).contains(&s.rho_copol), "simulation.rho_copol", "must be in [0, 1]")?;
        check(
            (0.0..=1.0).contains(&s.rho_crosspol),
            "simulation.rho_crosspol",
            "must be in [0, 1]",
        )?;
        check(s.extinction_db_per_m >= 0.0, "simulation.extinction_db_per_m", "must be non-negative")?;
        check(s.noise_power >= 0.0, "simulation.noise_power", "must be non-negative")?;
        if let Some(d) = &s.decorrelation {
            check(
                d.len() == self.baselines,
                "simulation.decorrelation",
                "needs one factor per baseline",
            )?;
            check(
                d.iter().all(|g| (0.0..=1.0).contains(g)),
                "simulation.decorrelation",
                "factors must be in [0, 1]",
            )?;
        }
        let e = &self.experiment;
        check(
            e.test_size >= self.patch && e.test_size <= s.size,
            "experiment.test_size",
            "must lie between the patch size and the scene size",
        )?;
        check(!e.modes.is_empty(), "experiment.modes", "must not be empty")?;
        if let Some(o) = e.overlap {
            check(o < self.patch, "experiment.overlap", "must be smaller than the patch size")?;
        }
        Ok(())
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".into());
            Error::invalid(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Reads and validates a configuration document, applying `key=value`
/// overrides (dotted keys) before validation.
pub fn load_config_with(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Metadata {
                path: p.to_path_buf(),
                reason: e.to_string(),
            })?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    RunConfig::from_value(value)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    load_config_with(Some(path.as_ref()), &[])
}

/// Sets `a.b.c=value` in a JSON document. The value is parsed as JSON when
/// possible and kept as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid(assignment, "override must look like key=value"))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(Error::invalid(key, "override path crosses a non-object value"));
        }
        let map = cur.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_match_published_training_setup() {
        let cfg = RunConfig::from_value(json!({"mode": "FP", "baselines": 6})).unwrap();
        assert_eq!(cfg.training.lr, 0.01);
        assert_eq!(cfg.training.momentum, 0.9);
        assert_eq!(cfg.training.batch, 64);
        assert_eq!(cfg.patch, 64);
        assert_eq!(cfg.training.decay_factor, 0.5);
        assert_eq!(cfg.training.decay_period, 200);
        assert_eq!(cfg.quantizer.step, 1.0);
    }

    #[test]
    fn single_class_quantizer_is_rejected_by_name() {
        let err = RunConfig::from_value(json!({"quantizer": {"K": 1}})).unwrap_err();
        match err {
            Error::Invalid { field, .. } => assert_eq!(field, "quantizer.K"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decay_half_every_200_accepted() {
        let cfg = RunConfig::from_value(json!({"training": {"decay_factor": 0.5, "decay_period": 200}}))
            .unwrap();
        assert_eq!(cfg.training.decay_period, 200);
        assert!(RunConfig::from_value(json!({"training": {"decay_factor": 1.5}})).is_err());
        assert!(RunConfig::from_value(json!({"training": {"decay_factor": 0.0}})).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_value(json!({"trainig": {}})).unwrap_err();
        assert!(err.to_string().contains("trainig"), "{err}");
        assert!(RunConfig::from_value(json!({"training": {"lr0": 1.0}})).is_err());
    }

    #[test]
    fn other_invariants() {
        assert!(RunConfig::from_value(json!({"patch": 0})).is_err());
        assert!(RunConfig::from_value(json!({"quantizer": {"step": 0.0}})).is_err());
        assert!(RunConfig::from_value(json!({"training": {"batch": 0}})).is_err());
        assert!(RunConfig::from_value(json!({"window": 4})).is_err());
        assert!(RunConfig::from_value(json!({"patch": 60})).is_err());
    }

    #[test]
    fn overrides_apply_dotted_keys() {
        let mut v = json!({});
        apply_override(&mut v, "training.lr=0.5").unwrap();
        apply_override(&mut v, "mode=HHVV").unwrap();
        apply_override(&mut v, "experiment.modes=[\"FP\"]").unwrap();
        let cfg = RunConfig::from_value(v).unwrap();
        assert_eq!(cfg.training.lr, 0.5);
        assert_eq!(cfg.mode, PolMode::HHVV);
        assert_eq!(cfg.experiment.modes, vec![PolMode::FP]);
        assert!(apply_override(&mut json!({}), "novalue").is_err());
    }

    #[test]
    fn round_trip_through_json() {
        let cfg = RunConfig::from_value(json!({
            "mode": "HV", "quantizer": {"h_min": 2.5, "K": 40},
            "simulation": {"profile": "lope-like", "decorrelation": [1.0, 0.9, 0.9, 0.8, 0.8, 0.7]}
        }))
        .unwrap();
        let back = RunConfig::from_value(serde_json::from_str(&cfg.to_json()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"mode":"FP","baselines":6}"#).unwrap();
        assert_eq!(load_config(&p).unwrap().training.batch, 64);
        let cfg = load_config_with(Some(&p), &["quantizer.K=3".into()]).unwrap();
        assert_eq!(cfg.quantizer.k, Some(3));
    }
}
