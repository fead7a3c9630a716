//! Random-volume-over-ground covariance model.
//!
//! Per pixel the multi-polarization covariance is a sum of Kronecker
//! products, one per scattering mechanism, plus white noise:
//!
//! ```text
//! R = T_g ⊗ (a(z_g) a(z_g)† ∘ Γ) + T_v ⊗ (∫ f(z) a(z_g+z) a(z_g+z)† dz ∘ Γ) + σ² I
//! ```
//!
//! `T_g`, `T_v` are Φ×Φ polarimetric matrices built from per-channel powers
//! and a fixed coherence pattern, `f` is the normalised exponential volume
//! profile and `Γ` the optional temporal decorrelation. Each term is PSD, so
//! `R` is PSD by construction.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::geometry::{steering_vector, AcquisitionGeometry};
use crate::error::{Error, Result};
use crate::polarization::{Pol, PolMode};

/// Vertical sampling step of the volume integral in meters.
pub const VOLUME_STEP: f64 = 0.5;

/// Converts a one-way power extinction in dB/m to the amplitude extinction
/// coefficient κ (1/m) used in `exp(2κz / cos θ)`.
pub fn extinction_from_db(db_per_m: f64) -> f64 {
    db_per_m / (20.0 * std::f64::consts::LOG10_E)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatteringParams {
    /// Relative ground power in HH, HV, VV.
    pub ground_pol: [f64; 3],
    /// Relative volume power in HH, HV, VV.
    pub volume_pol: [f64; 3],
    /// Coherence between HH and VV.
    pub rho_copol: f64,
    /// Coherence between HV and either co-polarized channel.
    pub rho_crosspol: f64,
    /// Amplitude extinction κ in 1/m.
    pub extinction: f64,
    pub noise_power: f64,
    /// Per-baseline temporal coherence; `None` means fully coherent.
    pub decorrelation: Option<Vec<f64>>,
}

impl Default for ScatteringParams {
    fn default() -> Self {
        ScatteringParams {
            ground_pol: [1.0, 0.1, 0.7],
            volume_pol: [0.5, 0.35, 0.5],
            rho_copol: 0.8,
            rho_crosspol: 0.4,
            extinction: extinction_from_db(0.1),
            noise_power: 0.05,
            decorrelation: None,
        }
    }
}

impl ScatteringParams {
    pub fn validate(&self) -> Result<()> {
        let (a, c) = (self.rho_copol, self.rho_crosspol);
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&c) {
            return Err(Error::invalid("simulation.rho_copol", "coherences must lie in [0, 1]"));
        }
        // Determinant of [[1,c,a],[c,1,c],[a,c,1]]; with 1 - a² ≥ 0 this makes the
        // coherence pattern PSD.
        let det = 1.0 + 2.0 * c * c * a - a * a - 2.0 * c * c;
        if det < -1e-12 {
            return Err(Error::invalid(
                "simulation.rho_crosspol",
                "coherence pattern is not positive semidefinite",
            ));
        }
        if self.ground_pol.iter().chain(&self.volume_pol).any(|p| *p < 0.0) {
            return Err(Error::invalid("simulation", "polarization powers must be non-negative"));
        }
        if self.noise_power < 0.0 || self.extinction < 0.0 {
            return Err(Error::invalid("simulation", "noise and extinction must be non-negative"));
        }
        Ok(())
    }

    fn coherence(&self, p: Pol, q: Pol) -> f64 {
        use Pol::*;
        match (p, q) {
            _ if p == q => 1.0,
            (HH, VV) | (VV, HH) => self.rho_copol,
            _ => self.rho_crosspol,
        }
    }
}

/// Ground and canopy state of one resolution cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthPixel {
    pub ground: f64,
    pub canopy: f64,
    pub ground_power: f64,
    pub volume_power: f64,
}

/// Normalised volume profile weights at cell midpoints of `[0, h]`.
/// Returns `(heights above ground, weights summing to one)`.
pub fn volume_profile(height: f64, extinction: f64, incidence: f64) -> (Vec<f64>, Vec<f64>) {
    if height <= 0.0 {
        return (vec![], vec![]);
    }
    let cells = (height / VOLUME_STEP).ceil().max(1.0) as usize;
    let dz = height / cells as f64;
    let z: Vec<f64> = (0..cells).map(|j| (j as f64 + 0.5) * dz).collect();
    let rate = 2.0 * extinction / incidence.cos();
    let w: Vec<f64> = z.iter().map(|z| (rate * z).exp()).collect();
    let total: f64 = w.iter().sum();
    (z, w.into_iter().map(|w| w / total).collect())
}

fn temporal_mask(decorrelation: Option<&[f64]>, n: usize) -> DMatrix<f64> {
    match decorrelation {
        None => DMatrix::from_element(n, n, 1.0),
        Some(g) => DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { g[i] * g[j] }),
    }
}

/// Single-polarization N×N structures of the ground and volume mechanisms.
fn mechanism_structures(
    geom: &AcquisitionGeometry,
    pixel: &TruthPixel,
    params: &ScatteringParams,
) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
    let n = geom.n();
    let kz = geom.vertical_wavenumbers();
    let gamma = temporal_mask(params.decorrelation.as_deref(), n);
    let a = steering_vector(&kz, pixel.ground);
    let ground = DMatrix::from_fn(n, n, |i, j| a[i] * a[j].conj() * gamma[(i, j)]);
    let mut volume = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    let (z, w) = volume_profile(pixel.canopy, params.extinction, geom.incidence);
    for (z, w) in z.iter().zip(&w) {
        let a = steering_vector(&kz, pixel.ground + z);
        for i in 0..n {
            for j in 0..n {
                volume[(i, j)] += a[i] * a[j].conj() * *w;
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            volume[(i, j)] *= gamma[(i, j)];
        }
    }
    (ground, volume)
}

/// Analytic ΦN×ΦN covariance of one pixel, channels ordered by
/// polarization group then baseline.
pub fn pixel_covariance_truth(
    geom: &AcquisitionGeometry,
    pixel: &TruthPixel,
    mode: PolMode,
    params: &ScatteringParams,
) -> DMatrix<Complex64> {
    let n = geom.n();
    let pols = mode.pols();
    let phi = pols.len();
    let (ground, volume) = mechanism_structures(geom, pixel, params);
    let mut r = DMatrix::from_element(phi * n, phi * n, Complex64::new(0.0, 0.0));
    for (bp, &p) in pols.iter().enumerate() {
        for (bq, &q) in pols.iter().enumerate() {
            let rho = params.coherence(p, q);
            let tg = rho
                * (pixel.ground_power * params.ground_pol[p.full_index()]).sqrt()
                * (pixel.ground_power * params.ground_pol[q.full_index()]).sqrt();
            let tv = rho
                * (pixel.volume_power * params.volume_pol[p.full_index()]).sqrt()
                * (pixel.volume_power * params.volume_pol[q.full_index()]).sqrt();
            for i in 0..n {
                for j in 0..n {
                    let mut v = ground[(i, j)] * tg + volume[(i, j)] * tv;
                    if bp == bq && i == j {
                        v += params.noise_power;
                        // Diagonal is real by construction; drop rounding residue.
                        v.im = 0.0;
                    }
                    r[(bp * n + i, bq * n + j)] = v;
                }
            }
        }
    }
    r
}
