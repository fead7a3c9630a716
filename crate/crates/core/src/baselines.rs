//! Beamforming and Capon vertical spectra with peak-based ground and canopy
//! extraction.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::TomoStack;
use crate::error::{Error, Result};
use crate::raster::{box_mean, check_window, Grid};
use crate::simulation::AcquisitionGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Beamforming,
    Capon,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Beamforming => "beamforming",
            Method::Capon => "capon",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beamforming" => Ok(Method::Beamforming),
            "capon" => Ok(Method::Capon),
            _ => Err(Error::invalid("method", format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerticalSpectrum {
    pub z: Vec<f64>,
    pub power: Vec<f64>,
    pub method: Method,
}

/// Uniform grid `z_min, z_min + dz, …` up to and including `z_max` (within
/// rounding).
pub fn height_grid(z_min: f64, z_max: f64, dz: f64) -> Result<Vec<f64>> {
    if !(dz > 0.0) || !(z_max > z_min) {
        return Err(Error::invalid("baseline.dz", "grid needs dz > 0 and z_max > z_min"));
    }
    let n = ((z_max - z_min) / dz + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| z_min + i as f64 * dz).collect())
}

fn check_hermitian(r: &DMatrix<Complex64>) -> Result<()> {
    if !r.is_square() {
        return Err(Error::Shape("covariance must be square".into()));
    }
    let scale = r.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    for i in 0..r.nrows() {
        for j in i..r.ncols() {
            worst = worst.max((r[(i, j)] - r[(j, i)].conj()).norm());
        }
    }
    if worst > 1e-10 * scale {
        return Err(Error::NotHermitian(worst / scale.max(f64::MIN_POSITIVE)));
    }
    Ok(())
}

/// Steering vectors precomputed over a height grid.
#[derive(Debug, Clone)]
pub struct Spectrometer {
    z: Vec<f64>,
    steering: Vec<Vec<Complex64>>,
}

impl Spectrometer {
    pub fn new(geom: &AcquisitionGeometry, z: Vec<f64>) -> Result<Self> {
        if z.is_empty() || z.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("baseline.dz", "height grid must be nonempty and strictly increasing"));
        }
        let steering = z.iter().map(|h| geom.steering_vector(*h)).collect();
        Ok(Spectrometer { z, steering })
    }

    pub fn grid(&self) -> &[f64] {
        &self.z
    }

    fn quadratic(a: &[Complex64], m: &DMatrix<Complex64>) -> f64 {
        let n = a.len();
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..n {
            let mut row = Complex64::new(0.0, 0.0);
            for j in 0..n {
                row += m[(i, j)] * a[j];
            }
            acc += a[i].conj() * row;
        }
        acc.re
    }

    /// `P(z) = a(z)† R a(z) / N²`.
    pub fn beamforming(&self, r: &DMatrix<Complex64>) -> Result<VerticalSpectrum> {
        check_hermitian(r)?;
        self.check_dim(r)?;
        let n2 = (r.nrows() * r.nrows()) as f64;
        let power = self.steering.iter().map(|a| (Self::quadratic(a, r) / n2).max(0.0)).collect();
        Ok(VerticalSpectrum { z: self.z.clone(), power, method: Method::Beamforming })
    }

    /// `P(z) = 1 / a(z)† (R + ε·tr(R)/N·I)⁻¹ a(z)`.
    pub fn capon(&self, r: &DMatrix<Complex64>, loading: f64) -> Result<VerticalSpectrum> {
        check_hermitian(r)?;
        self.check_dim(r)?;
        let n = r.nrows();
        let load = loading * r.trace().re / n as f64;
        let mut rl = r.clone();
        for i in 0..n {
            rl[(i, i)] += load;
        }
        let inv = match rl.clone().cholesky() {
            Some(c) => c.inverse(),
            None => rl.try_inverse().ok_or(Error::Singular)?,
        };
        let power = self
            .steering
            .iter()
            .map(|a| {
                let q = Self::quadratic(a, &inv);
                if q > 0.0 && q.is_finite() {
                    Ok(1.0 / q)
                } else {
                    Err(Error::Singular)
                }
            })
            .collect::<Result<_>>()?;
        Ok(VerticalSpectrum { z: self.z.clone(), power, method: Method::Capon })
    }

    pub fn spectrum(&self, method: Method, r: &DMatrix<Complex64>, loading: f64) -> Result<VerticalSpectrum> {
        match method {
            Method::Beamforming => self.beamforming(r),
            Method::Capon => self.capon(r, loading),
        }
    }

    fn check_dim(&self, r: &DMatrix<Complex64>) -> Result<()> {
        let n = self.steering.first().map_or(0, Vec::len);
        if r.nrows() != n {
            return Err(Error::Shape(format!("{}x{} covariance for {n} baselines", r.nrows(), r.ncols())));
        }
        Ok(())
    }
}

pub fn beamforming_spectrum(r: &DMatrix<Complex64>, geom: &AcquisitionGeometry, z: &[f64]) -> Result<VerticalSpectrum> {
    Spectrometer::new(geom, z.to_vec())?.beamforming(r)
}

pub fn capon_spectrum(r: &DMatrix<Complex64>, geom: &AcquisitionGeometry, z: &[f64], loading: f64) -> Result<VerticalSpectrum> {
    Spectrometer::new(geom, z.to_vec())?.capon(r, loading)
}

/// Ground is the lowest local maximum reaching `alpha·max(P)`; the canopy
/// top is the highest height reaching `beta·max(P)`. A flat spectrum gives
/// `(z_min, z_max)`.
pub fn extract_heights(spec: &VerticalSpectrum, alpha: f64, beta: f64) -> Result<(f64, f64)> {
    let p = &spec.power;
    if p.is_empty() {
        return Err(Error::NoPeak);
    }
    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        return Err(Error::NoPeak);
    }
    let n = p.len();
    let is_peak = |i: usize| (i == 0 || p[i] >= p[i - 1]) && (i + 1 == n || p[i] >= p[i + 1]);
    let g = (0..n).find(|&i| is_peak(i) && p[i] >= alpha * max).ok_or(Error::NoPeak)?;
    let c = (0..n).rev().find(|&i| p[i] >= beta * max).ok_or(Error::NoPeak)?;
    Ok((spec.z[g], spec.z[c.max(g)]))
}

/// Per-pixel `N×N` covariance averaged over the polarization channels the
/// stack holds, from the same clipped-window estimate as the features.
pub fn single_pol_covariances(stack: &TomoStack, window: usize) -> Result<Vec<DMatrix<Complex64>>> {
    check_window(window, stack.rows, stack.cols)?;
    let n = stack.n_baselines();
    let phi = stack.mode.phi();
    let ch = stack.channels();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let means: Vec<Vec<Complex64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let prod: Vec<Complex64> = stack
                .data
                .chunks_exact(ch)
                .map(|px| {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for g in 0..phi {
                        let a = px[g * n + i];
                        let b = px[g * n + j];
                        let a = Complex64::new(a.re as f64, a.im as f64);
                        let b = Complex64::new(b.re as f64, b.im as f64);
                        acc += a * b.conj();
                    }
                    acc / phi as f64
                })
                .collect();
            box_mean(&prod, stack.rows, stack.cols, window)
        })
        .collect();
    Ok((0..stack.rows * stack.cols)
        .map(|px| {
            let mut m = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
            for (&(i, j), mean) in pairs.iter().zip(&means) {
                let v = mean[px];
                if i == j {
                    m[(i, i)] = Complex64::new(v.re, 0.0);
                } else {
                    m[(i, j)] = v;
                    m[(j, i)] = v.conj();
                }
            }
            m
        })
        .collect())
}

/// Ground elevation and canopy height (top minus ground) maps. Pixels
/// without a usable peak are NaN.
pub struct HeightMaps {
    pub ground: Grid<f64>,
    pub canopy: Grid<f64>,
    pub failures: usize,
}

pub struct BaselineOptions {
    pub z: Vec<f64>,
    pub loading: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub fn baseline_heights(stack: &TomoStack, window: usize, method: Method, opts: &BaselineOptions) -> Result<HeightMaps> {
    let covs = single_pol_covariances(stack, window)?;
    let sp = Spectrometer::new(&stack.geometry, opts.z.clone())?;
    let heights: Vec<Option<(f64, f64)>> = covs
        .par_iter()
        .map(|r| match sp.spectrum(method, r, opts.loading) {
            Ok(s) => extract_heights(&s, opts.alpha, opts.beta).ok(),
            Err(Error::Singular) => None,
            Err(e) => panic!("covariance estimate rejected: {e}"),
        })
        .collect();
    let failures = heights.iter().filter(|h| h.is_none()).count();
    let ground = heights.iter().map(|h| h.map_or(f64::NAN, |(g, _)| g)).collect();
    let canopy = heights.iter().map(|h| h.map_or(f64::NAN, |(g, c)| c - g)).collect();
    Ok(HeightMaps {
        ground: Grid { rows: stack.rows, cols: stack.cols, data: ground },
        canopy: Grid { rows: stack.rows, cols: stack.cols, data: canopy },
        failures,
    })
}

/// Width of the contiguous region around the peak nearest `z0` where the
/// spectrum stays above half that peak's power.
pub fn half_power_width(spec: &VerticalSpectrum, z0: f64) -> f64 {
    let p = &spec.power;
    let n = p.len();
    let mut i = (0..n)
        .min_by(|a, b| (spec.z[*a] - z0).abs().total_cmp(&(spec.z[*b] - z0).abs()))
        .unwrap();
    while i + 1 < n && p[i + 1] > p[i] {
        i += 1;
    }
    while i > 0 && p[i - 1] > p[i] {
        i -= 1;
    }
    let half = p[i] / 2.0;
    let crossing = |a: usize, b: usize| {
        let t = (p[a] - half) / (p[a] - p[b]);
        spec.z[a] + t * (spec.z[b] - spec.z[a])
    };
    let mut hi = i;
    while hi + 1 < n && p[hi + 1] >= half {
        hi += 1;
    }
    let right = if hi + 1 < n { crossing(hi, hi + 1) } else { spec.z[hi] };
    let mut lo = i;
    while lo > 0 && p[lo - 1] >= half {
        lo -= 1;
    }
    let left = if lo > 0 { crossing(lo, lo - 1) } else { spec.z[lo] };
    right - left
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{pixel_covariance_truth, ScatteringParams, TruthPixel};
    use crate::polarization::PolMode;

    fn geom() -> AcquisitionGeometry {
        AcquisitionGeometry::tropisar()
    }

    fn outer(a: &[Complex64], p: f64) -> DMatrix<Complex64> {
        DMatrix::from_fn(a.len(), a.len(), |i, j| a[i] * a[j].conj() * p)
    }

    fn identity(n: usize) -> DMatrix<Complex64> {
        DMatrix::identity(n, n)
    }

    fn grid() -> Vec<f64> {
        height_grid(-10.0, 80.0, 0.5).unwrap()
    }

    fn argmax(p: &[f64]) -> usize {
        (0..p.len()).max_by(|a, b| p[*a].total_cmp(&p[*b])).unwrap()
    }

    #[test]
    fn grid_endpoints() {
        let z = grid();
        assert_eq!(z.len(), 181);
        assert_eq!((z[0], z[180]), (-10.0, 80.0));
    }

    #[test]
    fn beamforming_single_source_on_nearest_grid_point() {
        let z = grid();
        for z0 in [0.0, 12.3, 27.76, 41.1] {
            let r = outer(&geom().steering_vector(z0), 1.0);
            let s = beamforming_spectrum(&r, &geom(), &z).unwrap();
            let nearest = (0..z.len()).min_by(|a, b| (z[*a] - z0).abs().total_cmp(&(z[*b] - z0).abs())).unwrap();
            assert_eq!(argmax(&s.power), nearest, "source at {z0}");
        }
    }

    #[test]
    fn white_input_is_flat() {
        let z = grid();
        let bf = beamforming_spectrum(&identity(6), &geom(), &z).unwrap();
        let cp = capon_spectrum(&identity(6), &geom(), &z, 0.0).unwrap();
        for (b, c) in bf.power.iter().zip(&cp.power) {
            assert!((b - 1.0 / 6.0).abs() < 1e-14);
            assert!((c - 1.0 / 6.0).abs() < 1e-14);
        }
        assert_eq!(extract_heights(&bf, 0.25, 0.25).unwrap(), (-10.0, 80.0));
    }

    fn two_source() -> DMatrix<Complex64> {
        let g = geom();
        outer(&g.steering_vector(5.0), 1.0) + outer(&g.steering_vector(35.0), 1.0) + identity(6) * Complex64::new(0.01, 0.0)
    }

    #[test]
    fn two_sources_resolved_by_beamforming() {
        // Oracle: local maxima of a dense 0.01 m grid search. The search stops at
        // 60 m: the 5 m source has an ambiguity replica near 75 m.
        let dense = height_grid(-10.0, 60.0, 0.01).unwrap();
        let s = beamforming_spectrum(&two_source(), &geom(), &dense).unwrap();
        let p = &s.power;
        let max = p.iter().cloned().fold(0.0, f64::max);
        let peaks: Vec<f64> = (1..p.len() - 1)
            .filter(|&i| p[i] > p[i - 1] && p[i] >= p[i + 1] && p[i] > 0.5 * max)
            .map(|i| dense[i])
            .collect();
        assert_eq!(peaks.len(), 2, "{peaks:?}");
        assert!((peaks[0] - 5.0).abs() <= 1.0 && (peaks[1] - 35.0).abs() <= 1.0, "{peaks:?}");
    }

    #[test]
    fn capon_single_source_20db() {
        let z = grid();
        let z0 = 18.0;
        let r = outer(&geom().steering_vector(z0), 1.0) + identity(6) * Complex64::new(0.01, 0.0);
        let s = capon_spectrum(&r, &geom(), &z, 1e-3).unwrap();
        assert!((z[argmax(&s.power)] - z0).abs() <= 0.5);
    }

    #[test]
    fn capon_mainlobe_narrower_than_beamforming() {
        let z = height_grid(-10.0, 80.0, 0.05).unwrap();
        let r = two_source();
        let bf = beamforming_spectrum(&r, &geom(), &z).unwrap();
        let cp = capon_spectrum(&r, &geom(), &z, 1e-3).unwrap();
        for z0 in [5.0, 35.0] {
            let (wb, wc) = (half_power_width(&bf, z0), half_power_width(&cp, z0));
            assert!(wc <= wb, "at {z0}: capon {wc} vs beamforming {wb}");
        }
    }

    #[test]
    fn scaling_invariance() {
        let z = grid();
        let r = two_source();
        let k = 7.3;
        let rs = &r * Complex64::new(k, 0.0);
        let (b1, b2) = (beamforming_spectrum(&r, &geom(), &z).unwrap(), beamforming_spectrum(&rs, &geom(), &z).unwrap());
        let (c1, c2) = (capon_spectrum(&r, &geom(), &z, 1e-3).unwrap(), capon_spectrum(&rs, &geom(), &z, 1e-3).unwrap());
        for i in 0..z.len() {
            assert!((b2.power[i] - k * b1.power[i]).abs() <= 1e-12 * b2.power[i]);
            assert!((c2.power[i] - k * c1.power[i]).abs() <= 1e-9 * c2.power[i]);
        }
        assert_eq!(extract_heights(&b1, 0.25, 0.25).unwrap(), extract_heights(&b2, 0.25, 0.25).unwrap());
        assert_eq!(extract_heights(&c1, 0.25, 0.25).unwrap(), extract_heights(&c2, 0.25, 0.25).unwrap());
    }

    #[test]
    fn single_peak_heights_coincide() {
        let z = grid();
        let s = beamforming_spectrum(&outer(&geom().steering_vector(22.0), 2.0), &geom(), &z).unwrap();
        let (g, c) = extract_heights(&s, 0.25, 0.99).unwrap();
        assert_eq!(g, 22.0);
        assert!((22.0..=22.0 + half_power_width(&s, 22.0) / 2.0).contains(&c), "{c}");
    }

    #[test]
    fn zero_spectrum_has_no_peak() {
        let s = VerticalSpectrum { z: vec![0.0, 1.0], power: vec![0.0, 0.0], method: Method::Beamforming };
        assert!(matches!(extract_heights(&s, 0.25, 0.25), Err(Error::NoPeak)));
    }

    #[test]
    fn non_hermitian_rejected() {
        let mut r = identity(6);
        r[(0, 1)] = Complex64::new(0.5, 0.0);
        assert!(matches!(beamforming_spectrum(&r, &geom(), &grid()), Err(Error::NotHermitian(_))));
        assert!(capon_spectrum(&r, &geom(), &grid(), 1e-3).is_err());
    }

    #[test]
    fn simulated_pixel_ground_from_beamforming() {
        // Simulator truth is the oracle: a dominant ground return under a short volume.
        let px = TruthPixel { ground: 20.0, canopy: 10.0, ground_power: 1.0, volume_power: 0.3 };
        let full = pixel_covariance_truth(&geom(), &px, PolMode::HH, &ScatteringParams::default());
        let s = beamforming_spectrum(&full, &geom(), &grid()).unwrap();
        let (g, c) = extract_heights(&s, 0.25, 0.25).unwrap();
        assert!((g - 20.0).abs() <= 2.0, "ground {g}");
        assert!(c >= g);
    }
}
