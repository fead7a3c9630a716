//! Synthetic forest scenes with known ground and canopy truth.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex32;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::geometry::AcquisitionGeometry;
use super::model::{pixel_covariance_truth, ScatteringParams, TruthPixel};
use super::sampler::{draw_with_factor, pixel_rng, psd_factor};
use crate::covariance::TomoStack;
use crate::error::{Error, Result};
use crate::polarization::PolMode;
use crate::raster::{box_mean, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Profile {
    /// Tropical rain forest under the TropiSAR geometry: canopy 0-60 m over
    /// undulating 5-45 m terrain.
    #[default]
    #[serde(rename = "paracou-like")]
    ParacouLike,
    /// Forest-savanna mosaic under the AfriSAR geometry: forest patches of
    /// 30-50 m canopy, bare savanna elsewhere, hilly relative terrain.
    #[serde(rename = "lope-like")]
    LopeLike,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::ParacouLike => "paracou-like",
            Profile::LopeLike => "lope-like",
        }
    }

    pub fn geometry(self) -> AcquisitionGeometry {
        match self {
            Profile::ParacouLike => AcquisitionGeometry::tropisar(),
            Profile::LopeLike => AcquisitionGeometry::afrisar(),
        }
    }

    /// Ground elevation envelope in meters.
    pub fn ground_range(self) -> (f64, f64) {
        match self {
            Profile::ParacouLike => (5.0, 45.0),
            Profile::LopeLike => (0.0, 40.0),
        }
    }

    /// Canopy height envelope of forested pixels in meters.
    pub fn canopy_range(self) -> (f64, f64) {
        match self {
            Profile::ParacouLike => (0.0, 60.0),
            Profile::LopeLike => (30.0, 50.0),
        }
    }

    /// Fraction of pixels that carry forest.
    pub fn forest_fraction(self) -> f64 {
        match self {
            Profile::ParacouLike => 1.0,
            Profile::LopeLike => 0.7,
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paracou-like" => Ok(Profile::ParacouLike),
            "lope-like" => Ok(Profile::LopeLike),
            _ => Err(Error::invalid("simulation.profile", format!("unknown profile `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub ground: Grid<f64>,
    pub canopy: Grid<f64>,
    pub ground_power: Grid<f64>,
    pub volume_power: Grid<f64>,
    /// Amplitude extinction κ in 1/m.
    pub extinction: f64,
    pub noise_power: f64,
}

impl SceneTruth {
    pub fn rows(&self) -> usize {
        self.ground.rows
    }

    pub fn cols(&self) -> usize {
        self.ground.cols
    }

    pub fn pixel(&self, idx: usize) -> TruthPixel {
        TruthPixel {
            ground: self.ground.data[idx],
            canopy: self.canopy.data[idx],
            ground_power: self.ground_power.data[idx],
            volume_power: self.volume_power.data[idx],
        }
    }
}

/// Smooth random field in `[0, 1]`: white noise through three box blurs,
/// then min-max scaled.
fn smooth_field(size: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut v: Vec<f64> = (0..size * size).map(|_| StandardNormal.sample(&mut rng)).collect();
    let window = ((size / 16) | 1).max(3).min(if size % 2 == 1 { size } else { size - 1 });
    for _ in 0..3 {
        v = box_mean(&v, size, size, window);
    }
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(*x), h.max(*x)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    v.iter().map(|x| ((x - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Builds the truth maps of a scene.
pub fn make_truth(profile: Profile, size: usize, seed: u64, params: &ScatteringParams) -> SceneTruth {
    let (g_lo, g_hi) = profile.ground_range();
    let (c_lo, c_hi) = profile.canopy_range();
    let ground_f = smooth_field(size, seed, 1);
    let canopy_f = smooth_field(size, seed, 2);
    let forest_f = smooth_field(size, seed, 3);
    let gpow_f = smooth_field(size, seed, 4);
    let vpow_f = smooth_field(size, seed, 5);

    // Threshold on the forest field chosen so the requested fraction is forested.
    let threshold = if profile.forest_fraction() >= 1.0 {
        f64::NEG_INFINITY
    } else {
        let mut sorted = forest_f.clone();
        sorted.sort_by(f64::total_cmp);
        sorted[((1.0 - profile.forest_fraction()) * sorted.len() as f64) as usize]
    };
    let geom = profile.geometry();
    let rate = 2.0 * params.extinction / geom.incidence.cos();
    let reference_height = 30.0;
    let volume_scale = |h: f64| {
        if rate == 0.0 {
            h / reference_height
        } else {
            (1.0 - (-rate * h).exp()) / (1.0 - (-rate * reference_height).exp())
        }
    };
    let db = |u: f64| 10f64.powf((4.0 * u - 2.0) / 10.0);

    let n = size * size;
    let mut ground = Vec::with_capacity(n);
    let mut canopy = Vec::with_capacity(n);
    let mut gp = Vec::with_capacity(n);
    let mut vp = Vec::with_capacity(n);
    for i in 0..n {
        ground.push(g_lo + (g_hi - g_lo) * ground_f[i]);
        let h = if forest_f[i] >= threshold {
            c_lo + (c_hi - c_lo) * canopy_f[i]
        } else {
            0.0
        };
        canopy.push(h);
        gp.push(db(gpow_f[i]));
        vp.push(volume_scale(h) * db(vpow_f[i]));
    }
    SceneTruth {
        ground: Grid { rows: size, cols: size, data: ground },
        canopy: Grid { rows: size, cols: size, data: canopy },
        ground_power: Grid { rows: size, cols: size, data: gp },
        volume_power: Grid { rows: size, cols: size, data: vp },
        extinction: params.extinction,
        noise_power: params.noise_power,
    }
}

/// Draws a single-look full-polarization stack from a truth scene.
pub fn simulate_stack(
    geom: &AcquisitionGeometry,
    truth: &SceneTruth,
    params: &ScatteringParams,
    seed: u64,
) -> Result<TomoStack> {
    let n = geom.n();
    let dim = 3 * n;
    let pixels = truth.rows() * truth.cols();
    // Distinct sampling seed space from the truth fields.
    let sample_seed = seed ^ 0x5eed_5a4d_1e5u64;
    let chunks: Vec<Vec<Complex32>> = (0..pixels)
        .into_par_iter()
        .map(|px| {
            let r = pixel_covariance_truth(geom, &truth.pixel(px), PolMode::FP, params);
            let l = psd_factor(&r)?;
            let mut rng = pixel_rng(sample_seed, px as u64);
            let mut y = Vec::with_capacity(dim);
            draw_with_factor(&l, 1, &mut rng, &mut y);
            Ok(y.into_iter().map(|v| Complex32::new(v.re as f32, v.im as f32)).collect())
        })
        .collect::<Result<_>>()?;
    TomoStack::new(
        truth.rows(),
        truth.cols(),
        PolMode::FP,
        geom.clone(),
        chunks.concat(),
    )
}

/// Generates a scene for `profile`: smooth random terrain and canopy inside
/// the profile's envelopes, and one speckled full-polarization stack.
pub fn make_scene(profile: Profile, size: usize, seed: u64) -> Result<(TomoStack, SceneTruth)> {
    make_scene_with(profile, size, seed, &ScatteringParams::default())
}

pub fn make_scene_with(
    profile: Profile,
    size: usize,
    seed: u64,
    params: &ScatteringParams,
) -> Result<(TomoStack, SceneTruth)> {
    if size < 3 {
        return Err(Error::invalid("simulation.size", "scene must be at least 3x3"));
    }
    params.validate()?;
    let geom = profile.geometry();
    if let Some(d) = &params.decorrelation {
        if d.len() != geom.n() {
            return Err(Error::invalid("simulation.decorrelation", "needs one factor per baseline"));
        }
    }
    let truth = make_truth(profile, size, seed, params);
    let stack = simulate_stack(&geom, &truth, params, seed)?;
    Ok((stack, truth))
}
