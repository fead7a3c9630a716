//! Forest canopy and ground height estimation from multi-baseline,
//! multi-polarization SAR stacks.
//!
//! The pipeline estimates per-pixel covariance matrices, encodes them as
//! real feature cubes, quantizes reference heights into classes and trains a
//! U-Net classifier on `W × W` patches. Beamforming and Capon spectra give
//! classical reference estimates, and [`simulation`] generates synthetic
//! scenes with known truth.

pub mod baselines;
pub mod config;
pub mod covariance;
pub mod dataset;
mod error;
pub mod experiment;
pub mod nn;
pub mod polarization;
pub mod raster;
pub mod simulation;
pub mod tensor_io;
pub mod train;

pub use baselines::{beamforming_spectrum, capon_spectrum, extract_heights, Method, VerticalSpectrum};
pub use config::{load_config, load_config_with, RunConfig, Target};
pub use covariance::{
    covariance_features, estimate_covariance, extract_features, normalize_features, select_polarizations,
    CovarianceField, FeatureCube, FeatureStats, TomoStack,
};
pub use dataset::{average_reference, quantize, split, tile_patches, Dataset, HeightQuantizer, PatchSet, Rect};
pub use error::{Error, Result};
pub use nn::{lr_at, sgd_step, softmax_cross_entropy, xavier_init, ModelState, UNetConfig};
pub use polarization::{feature_channel_count, Pol, PolMode};
pub use raster::Grid;
pub use simulation::{load_scene, make_scene, save_scene, AcquisitionGeometry, Profile, SceneInfo, SceneTruth};
pub use tensor_io::{read_tensor, write_tensor, Dtype, Tensor, TensorData};
pub use train::{
    bias, evaluate, fine_tune, joint_histogram, metrics_csv, predict_map, rmse, train, EvalReport, TrainOptions,
    TrainReport,
};
