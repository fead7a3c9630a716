use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multi-baseline acquisition geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionGeometry {
    /// Perpendicular baselines in meters, one per track.
    pub baselines: Vec<f64>,
    /// Radar wavelength in meters.
    pub wavelength: f64,
    /// Incidence angle in radians.
    pub incidence: f64,
    /// Slant range in meters.
    pub slant_range: f64,
}

impl AcquisitionGeometry {
    pub fn new(baselines: Vec<f64>, wavelength: f64, incidence: f64, slant_range: f64) -> Result<Self> {
        let g = AcquisitionGeometry {
            baselines,
            wavelength,
            incidence,
            slant_range,
        };
        g.validate()?;
        Ok(g)
    }

    /// Flat-earth slant range `flight_height / cos(incidence)`.
    pub fn from_flight_height(
        baselines: Vec<f64>,
        wavelength: f64,
        flight_height: f64,
        incidence_deg: f64,
    ) -> Result<Self> {
        let incidence = incidence_deg.to_radians();
        Self::new(baselines, wavelength, incidence, flight_height / incidence.cos())
    }

    /// P-band TropiSAR configuration over Paracou.
    pub fn tropisar() -> Self {
        Self::from_flight_height(
            vec![0.0, -14.4879, -30.1163, -43.7343, -60.0632, -74.9683],
            0.7542,
            3962.0,
            35.061,
        )
        .expect("valid constant geometry")
    }

    /// AfriSAR configuration over Lopé, at the centre of the 25-35 degree
    /// incidence span.
    pub fn afrisar() -> Self {
        Self::from_flight_height(
            vec![20.0, 0.0, -20.0, -40.0, -60.0, -80.0],
            0.69,
            6096.0,
            30.0,
        )
        .expect("valid constant geometry")
    }

    pub fn validate(&self) -> Result<()> {
        if self.baselines.len() < 2 {
            return Err(Error::invalid("geometry.baselines", "need at least two baselines"));
        }
        if self.baselines.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("geometry.baselines", "baselines must be finite"));
        }
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(Error::invalid("geometry.wavelength", "must be positive"));
        }
        if !(self.incidence > 0.0 && self.incidence < PI / 2.0) {
            return Err(Error::invalid("geometry.incidence", "must lie in (0, pi/2)"));
        }
        if !(self.slant_range > 0.0 && self.slant_range.is_finite()) {
            return Err(Error::invalid("geometry.slant_range", "must be positive"));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.baselines.len()
    }

    /// `k_z,n = 4π b_n / (λ r sin θ)` in rad/m.
    pub fn vertical_wavenumbers(&self) -> Vec<f64> {
        let denom = self.wavelength * self.slant_range * self.incidence.sin();
        self.baselines.iter().map(|b| 4.0 * PI * b / denom).collect()
    }

    /// Array response to a point scatterer at height `z`: `exp(i k_z,n z)`.
    pub fn steering_vector(&self, z: f64) -> Vec<Complex64> {
        steering_vector(&self.vertical_wavenumbers(), z)
    }
}

pub fn steering_vector(kz: &[f64], z: f64) -> Vec<Complex64> {
    kz.iter().map(|k| Complex64::from_polar(1.0, k * z)).collect()
}
