//! Multilook covariance estimation and the real-valued feature encoding fed
//! to the network.
//!
//! A pixel's feature vector holds the `ΦN` real diagonal entries of its
//! covariance followed by the real and then imaginary parts of the `ΦN − 1`
//! off-diagonal entries of the first row, so `M = 3ΦN − 2`.

use nalgebra::DMatrix;
use num_complex::{Complex32, Complex64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polarization::{feature_channel_count, PolMode};
use crate::raster::{box_mean, check_window, Grid};
use crate::simulation::AcquisitionGeometry;
use crate::tensor_io::{Tensor, TensorData};

/// Complex SLC cube `[rows, cols, ΦN]`; channels grouped by polarization
/// (HH, HV, VV order), baselines in acquisition order within a group.
#[derive(Debug, Clone, PartialEq)]
pub struct TomoStack {
    pub rows: usize,
    pub cols: usize,
    pub mode: PolMode,
    pub geometry: AcquisitionGeometry,
    pub data: Vec<Complex32>,
}

impl TomoStack {
    pub fn new(
        rows: usize,
        cols: usize,
        mode: PolMode,
        geometry: AcquisitionGeometry,
        data: Vec<Complex32>,
    ) -> Result<Self> {
        let ch = mode.phi() * geometry.n();
        if data.len() != rows * cols * ch {
            return Err(Error::invalid(
                "mode",
                format!(
                    "{} values do not form a {rows}x{cols}x{ch} stack for mode {mode}",
                    data.len()
                ),
            ));
        }
        Ok(TomoStack { rows, cols, mode, geometry, data })
    }

    pub fn n_baselines(&self) -> usize {
        self.geometry.n()
    }

    pub fn channels(&self) -> usize {
        self.mode.phi() * self.n_baselines()
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[Complex32] {
        let ch = self.channels();
        let i = (r * self.cols + c) * ch;
        &self.data[i..i + ch]
    }

    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> TomoStack {
        assert!(r0 + h <= self.rows && c0 + w <= self.cols, "crop out of bounds");
        let ch = self.channels();
        let mut data = Vec::with_capacity(h * w * ch);
        for r in r0..r0 + h {
            let s = (r * self.cols + c0) * ch;
            data.extend_from_slice(&self.data[s..s + w * ch]);
        }
        TomoStack { rows: h, cols: w, mode: self.mode, geometry: self.geometry.clone(), data }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.rows, self.cols, self.channels()],
            TensorData::Complex64(self.data.clone()),
        )
        .expect("stack shape is consistent")
        .with_name(format!("slc_stack_{}", self.mode))
        .with_units("amplitude")
    }

    pub fn from_tensor(t: Tensor, mode: PolMode, geometry: AcquisitionGeometry) -> Result<Self> {
        if t.shape.len() != 3 {
            return Err(Error::Shape(format!("stack must be 3-D, got {:?}", t.shape)));
        }
        let (rows, cols, ch) = (t.shape[0], t.shape[1], t.shape[2]);
        if ch != mode.phi() * geometry.n() {
            return Err(Error::invalid(
                "mode",
                format!("{ch} channels do not match mode {mode} with {} baselines", geometry.n()),
            ));
        }
        match t.data {
            TensorData::Complex64(data) => TomoStack::new(rows, cols, mode, geometry, data),
            other => Err(Error::UnsupportedDtype(format!("{:?} stack", other.dtype()))),
        }
    }
}

/// Keeps the channel groups of `mode`, preserving baseline order.
pub fn select_polarizations(stack: &TomoStack, mode: PolMode) -> Result<TomoStack> {
    if !stack.mode.contains(mode) {
        return Err(Error::invalid(
            "mode",
            format!("{mode} requests channels absent from a {} stack", stack.mode),
        ));
    }
    if mode == stack.mode {
        return Ok(stack.clone());
    }
    let n = stack.n_baselines();
    let src_ch = stack.channels();
    let groups: Vec<usize> = mode
        .pols()
        .iter()
        .map(|p| stack.mode.pols().iter().position(|q| q == p).unwrap())
        .collect();
    let mut data = Vec::with_capacity(stack.rows * stack.cols * groups.len() * n);
    for px in stack.data.chunks_exact(src_ch) {
        for g in &groups {
            data.extend_from_slice(&px[g * n..(g + 1) * n]);
        }
    }
    TomoStack::new(stack.rows, stack.cols, mode, stack.geometry.clone(), data)
}

/// Per-pixel Hermitian covariance matrices `[rows, cols, D, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceField {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub window: usize,
    pub data: Vec<Complex64>,
}

impl CovarianceField {
    #[inline]
    pub fn get(&self, px: usize, i: usize, j: usize) -> Complex64 {
        self.data[px * self.dim * self.dim + i * self.dim + j]
    }

    pub fn matrix(&self, r: usize, c: usize) -> DMatrix<Complex64> {
        let px = r * self.cols + c;
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(px, i, j))
    }

    /// The `N×N` diagonal block of polarization group `g`.
    pub fn block(&self, r: usize, c: usize, g: usize, n: usize) -> DMatrix<Complex64> {
        let px = r * self.cols + c;
        DMatrix::from_fn(n, n, |i, j| self.get(px, g * n + i, g * n + j))
    }
}

/// Windowed mean of `y_i conj(y_j)` over the clipped window.
fn product_mean(stack: &TomoStack, i: usize, j: usize, window: usize) -> Vec<Complex64> {
    let ch = stack.channels();
    let prod: Vec<Complex64> = stack
        .data
        .chunks_exact(ch)
        .map(|px| {
            let a = Complex64::new(px[i].re as f64, px[i].im as f64);
            if i == j {
                Complex64::new(a.norm_sqr(), 0.0)
            } else {
                let b = Complex64::new(px[j].re as f64, px[j].im as f64);
                a * b.conj()
            }
        })
        .collect();
    box_mean(&prod, stack.rows, stack.cols, window)
}

/// Spatially averaged covariance `R = ⟨y y†⟩` over a `window × window`
/// neighborhood, clipped at the image border.
pub fn estimate_covariance(stack: &TomoStack, window: usize) -> Result<CovarianceField> {
    check_window(window, stack.rows, stack.cols)?;
    let d = stack.channels();
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
    let means: Vec<Vec<Complex64>> = pairs
        .par_iter()
        .map(|&(i, j)| product_mean(stack, i, j, window))
        .collect();
    let pixels = stack.rows * stack.cols;
    let mut data = vec![Complex64::new(0.0, 0.0); pixels * d * d];
    for (&(i, j), m) in pairs.iter().zip(&means) {
        for (px, v) in m.iter().enumerate() {
            let base = px * d * d;
            data[base + i * d + j] = *v;
            data[base + j * d + i] = v.conj();
        }
    }
    Ok(CovarianceField { rows: stack.rows, cols: stack.cols, dim: d, window, data })
}

/// Real feature cube `[rows, cols, M]` with named channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCube {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub names: Vec<String>,
    pub data: Vec<f64>,
}

pub fn feature_names(dim: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..dim).map(|k| format!("diag_{k}")).collect();
    names.extend((1..dim).map(|k| format!("re_0{k}")));
    names.extend((1..dim).map(|k| format!("im_0{k}")));
    names
}

impl FeatureCube {
    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.cols + c) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> FeatureCube {
        assert!(r0 + h <= self.rows && c0 + w <= self.cols, "crop out of bounds");
        let m = self.channels;
        let mut data = Vec::with_capacity(h * w * m);
        for r in r0..r0 + h {
            let s = (r * self.cols + c0) * m;
            data.extend_from_slice(&self.data[s..s + w * m]);
        }
        FeatureCube { rows: h, cols: w, channels: m, names: self.names.clone(), data }
    }

    /// Dimension `D` of the covariance the cube encodes.
    pub fn covariance_dim(&self) -> usize {
        (self.channels + 2) / 3
    }

    /// Recovers the diagonal and first row of the encoded covariance.
    pub fn decode_pixel(&self, r: usize, c: usize) -> (Vec<f64>, Vec<Complex64>) {
        let d = self.covariance_dim();
        let f = self.pixel(r, c);
        let diag = f[..d].to_vec();
        let mut row = vec![Complex64::new(f[0], 0.0)];
        row.extend((1..d).map(|k| Complex64::new(f[d + k - 1], f[2 * d - 1 + k - 1])));
        (diag, row)
    }

    /// Stored as real32 with the channel map in the sidecar name.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.rows, self.cols, self.channels],
            TensorData::Real32(self.data.iter().map(|v| *v as f32).collect()),
        )
        .expect("feature shape is consistent")
        .with_name(self.names.join(","))
        .with_units("covariance")
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.shape.len() != 3 {
            return Err(Error::Shape(format!("feature cube must be 3-D, got {:?}", t.shape)));
        }
        let (rows, cols, m) = (t.shape[0], t.shape[1], t.shape[2]);
        let mut names: Vec<String> = t.name.split(',').map(str::to_string).collect();
        if names.len() != m {
            names = feature_names((m + 2) / 3);
        }
        let (_, data) = t.into_f64()?;
        Ok(FeatureCube { rows, cols, channels: m, names, data })
    }
}

fn encode(cube: &mut [f64], pixels: usize, m: usize, channel: usize, values: impl Iterator<Item = f64>) {
    for (px, v) in (0..pixels).zip(values) {
        cube[px * m + channel] = v;
    }
}

/// Encodes a covariance field as `[diag] ++ [Re R₀ₖ] ++ [Im R₀ₖ]`.
pub fn extract_features(cov: &CovarianceField) -> FeatureCube {
    let d = cov.dim;
    let m = feature_channel_count(1, d);
    let pixels = cov.rows * cov.cols;
    let mut data = vec![0.0; pixels * m];
    for k in 0..d {
        encode(&mut data, pixels, m, k, (0..pixels).map(|px| cov.get(px, k, k).re));
    }
    for k in 1..d {
        encode(&mut data, pixels, m, d + k - 1, (0..pixels).map(|px| cov.get(px, 0, k).re));
        encode(&mut data, pixels, m, 2 * d - 1 + k - 1, (0..pixels).map(|px| cov.get(px, 0, k).im));
    }
    FeatureCube { rows: cov.rows, cols: cov.cols, channels: m, names: feature_names(d), data }
}

/// Same result as `extract_features(&estimate_covariance(stack, window)?)`
/// but averages only the products the encoding keeps, so it scales to
/// whole scenes.
pub fn covariance_features(stack: &TomoStack, window: usize) -> Result<FeatureCube> {
    check_window(window, stack.rows, stack.cols)?;
    let d = stack.channels();
    let m = feature_channel_count(1, d);
    let pairs: Vec<(usize, usize)> = (0..d).map(|k| (k, k)).chain((1..d).map(|k| (0, k))).collect();
    let means: Vec<Vec<Complex64>> = pairs
        .par_iter()
        .map(|&(i, j)| product_mean(stack, i, j, window))
        .collect();
    let pixels = stack.rows * stack.cols;
    let mut data = vec![0.0; pixels * m];
    for k in 0..d {
        encode(&mut data, pixels, m, k, means[k].iter().map(|v| v.re));
    }
    for k in 1..d {
        let mean = &means[d + k - 1];
        encode(&mut data, pixels, m, d + k - 1, mean.iter().map(|v| v.re));
        encode(&mut data, pixels, m, 2 * d - 1 + k - 1, mean.iter().map(|v| v.im));
    }
    Ok(FeatureCube { rows: stack.rows, cols: stack.cols, channels: m, names: feature_names(d), data })
}

/// Per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl FeatureStats {
    /// Statistics over the pixels selected by `mask` (all pixels when `None`).
    pub fn compute(cube: &FeatureCube, mask: Option<&Grid<bool>>) -> Result<Self> {
        let m = cube.channels;
        let selected: Vec<usize> = (0..cube.rows * cube.cols)
            .filter(|px| mask.is_none_or(|g| g.data[*px]))
            .collect();
        if selected.is_empty() {
            return Err(Error::Empty("no pixels selected for feature statistics".into()));
        }
        let n = selected.len() as f64;
        let mut mean = vec![0.0; m];
        let mut std = vec![0.0; m];
        for ch in 0..m {
            let vals = selected.iter().map(|px| cube.data[px * m + ch]);
            let (lo, hi) = vals.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            if lo == hi {
                mean[ch] = lo;
                continue;
            }
            let mu = vals.clone().sum::<f64>() / n;
            let var = vals.map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean[ch] = mu;
            std[ch] = var.sqrt();
        }
        Ok(FeatureStats { mean, std })
    }

    /// The identity transform.
    pub fn identity(channels: usize) -> Self {
        FeatureStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn apply(&self, cube: &FeatureCube) -> Result<FeatureCube> {
        if self.mean.len() != cube.channels {
            return Err(Error::Shape(format!(
                "statistics for {} channels applied to a {}-channel cube",
                self.mean.len(),
                cube.channels
            )));
        }
        let m = cube.channels;
        let scale: Vec<f64> = self.std.iter().map(|s| 1.0 / s.max(STD_FLOOR)).collect();
        let data = cube
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % m]) * scale[i % m])
            .collect();
        Ok(FeatureCube { data, ..cube.clone() })
    }
}

/// Standardizes each channel: `(x − mean) / max(std, 1e-8)`. Statistics are
/// computed over the whole cube when not supplied. Not idempotent: applying
/// saved statistics to an already normalized cube shifts it again.
pub fn normalize_features(cube: &FeatureCube, stats: Option<&FeatureStats>) -> Result<(FeatureCube, FeatureStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => FeatureStats::compute(cube, None)?,
    };
    Ok((stats.apply(cube)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{make_scene, Profile};

    fn random_stack(rows: usize, cols: usize, mode: PolMode, seed: u64) -> TomoStack {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = AcquisitionGeometry::tropisar();
        let ch = mode.phi() * g.n();
        let data = (0..rows * cols * ch)
            .map(|_| Complex32::new(rng.random::<f32>() - 0.5, rng.random::<f32>() - 0.5))
            .collect();
        TomoStack::new(rows, cols, mode, g, data).unwrap()
    }

    #[test]
    fn polarization_subsets() {
        let s = random_stack(3, 4, PolMode::FP, 1);
        assert_eq!(s.channels(), 18);
        let dp = select_polarizations(&s, PolMode::HHVV).unwrap();
        assert_eq!(dp.channels(), 12);
        assert_eq!(dp.pixel(1, 2)[..6], s.pixel(1, 2)[..6]);
        assert_eq!(dp.pixel(1, 2)[6..], s.pixel(1, 2)[12..]);
        let sp = select_polarizations(&s, PolMode::HV).unwrap();
        assert_eq!(sp.channels(), 6);
        assert_eq!(sp.pixel(2, 3), &s.pixel(2, 3)[6..12]);
        assert_eq!(select_polarizations(&s, PolMode::FP).unwrap(), s);
        assert!(select_polarizations(&sp, PolMode::HH).is_err());
    }

    #[test]
    fn window_one_is_rank_one_outer_product() {
        let s = random_stack(4, 5, PolMode::HHVV, 2);
        let cov = estimate_covariance(&s, 1).unwrap();
        let y: Vec<Complex64> = s.pixel(2, 3).iter().map(|v| Complex64::new(v.re as f64, v.im as f64)).collect();
        let r = cov.matrix(2, 3);
        for i in 0..12 {
            for j in 0..12 {
                assert!((r[(i, j)] - y[i] * y[j].conj()).norm() < 1e-15);
            }
        }
        let ev = r.symmetric_eigen().eigenvalues;
        assert_eq!(ev.iter().filter(|e| e.abs() > 1e-12).count(), 1);
    }

    #[test]
    fn constant_stack_gives_same_matrix_everywhere() {
        let mut s = random_stack(6, 6, PolMode::HH, 3);
        let first = s.pixel(0, 0).to_vec();
        for px in s.data.chunks_exact_mut(6) {
            px.copy_from_slice(&first);
        }
        let w1 = estimate_covariance(&s, 1).unwrap();
        let w5 = estimate_covariance(&s, 5).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                let d = &w5.matrix(r, c) - w1.matrix(0, 0);
                assert!(d.norm() < 1e-14);
            }
        }
    }

    #[test]
    fn matches_brute_force_double_loop() {
        let s = random_stack(16, 16, PolMode::HHHV, 4);
        let w = 5;
        let cov = estimate_covariance(&s, w).unwrap();
        let h = (w / 2) as isize;
        let d = s.channels();
        for r in 0..16isize {
            for c in 0..16isize {
                let mut acc = DMatrix::from_element(d, d, Complex64::new(0.0, 0.0));
                let mut n = 0.0;
                for rr in r - h..=r + h {
                    for cc in c - h..=c + h {
                        if rr < 0 || cc < 0 || rr >= 16 || cc >= 16 {
                            continue;
                        }
                        let y: Vec<Complex64> = s
                            .pixel(rr as usize, cc as usize)
                            .iter()
                            .map(|v| Complex64::new(v.re as f64, v.im as f64))
                            .collect();
                        for i in 0..d {
                            for j in 0..d {
                                acc[(i, j)] += y[i] * y[j].conj();
                            }
                        }
                        n += 1.0;
                    }
                }
                let oracle = acc / Complex64::new(n, 0.0);
                let got = cov.matrix(r as usize, c as usize);
                assert!((&got - &oracle).norm() <= 1e-12 * oracle.norm());
                assert!((&got - got.adjoint()).norm() == 0.0);
                assert!((0..d).all(|i| got[(i, i)].re >= 0.0 && got[(i, i)].im == 0.0));
            }
        }
    }

    #[test]
    fn window_larger_than_image_is_error() {
        let s = random_stack(4, 8, PolMode::HH, 5);
        assert!(estimate_covariance(&s, 5).is_err());
        assert!(estimate_covariance(&s, 2).is_err());
        assert!(covariance_features(&s, 7).is_err());
    }

    #[test]
    fn feature_counts_per_mode() {
        for (mode, m) in [(PolMode::FP, 52), (PolMode::HHHV, 34), (PolMode::VV, 16)] {
            let s = random_stack(3, 3, mode, 6);
            let f = covariance_features(&s, 3).unwrap();
            assert_eq!(f.channels, m);
            assert_eq!(f.names.len(), m);
        }
    }

    #[test]
    fn identity_covariance_features() {
        let d = 4;
        let mut data = vec![Complex64::new(0.0, 0.0); 2 * d * d];
        for px in 0..2 {
            for i in 0..d {
                data[px * d * d + i * d + i] = Complex64::new(1.0, 0.0);
            }
        }
        let cov = CovarianceField { rows: 1, cols: 2, dim: d, window: 1, data };
        let f = extract_features(&cov);
        assert_eq!(f.channels, 10);
        for px in 0..2 {
            let v = &f.data[px * 10..(px + 1) * 10];
            assert!(v[..4].iter().all(|x| *x == 1.0));
            assert!(v[4..].iter().all(|x| *x == 0.0));
        }
        assert_eq!(f.names[4], "re_01");
        assert_eq!(f.names[7], "im_01");
    }

    #[test]
    fn direct_features_equal_full_field_encoding_and_decode_bitwise() {
        let s = random_stack(9, 7, PolMode::FP, 7);
        let cov = estimate_covariance(&s, 3).unwrap();
        let a = extract_features(&cov);
        let b = covariance_features(&s, 3).unwrap();
        assert_eq!(a, b);
        for (r, c) in [(0, 0), (4, 3), (8, 6)] {
            let (diag, row) = a.decode_pixel(r, c);
            let px = r * 7 + c;
            for k in 0..18 {
                assert_eq!(diag[k].to_bits(), cov.get(px, k, k).re.to_bits());
                assert_eq!(row[k].re.to_bits(), cov.get(px, 0, k).re.to_bits());
                if k > 0 {
                    assert_eq!(row[k].im.to_bits(), cov.get(px, 0, k).im.to_bits());
                }
            }
        }
    }

    #[test]
    fn simulated_region_close_to_truth() {
        // Monte-Carlo oracle: a constant-truth 22x22 region, window 11, replicated over
        // 8 independent realizations (968 looks per pixel). The expected error is
        // tr(R) / (||R|| sqrt(L)), about 0.06 here.
        use crate::simulation::{pixel_covariance_truth, ScatteringParams};
        let (stack, truth) = make_scene(Profile::ParacouLike, 48, 21).unwrap();
        let params = ScatteringParams::default();
        // Replicate one truth pixel so the window sees a constant-truth region.
        let px = truth.pixel(48 * 24 + 24);
        let r = pixel_covariance_truth(&stack.geometry, &px, PolMode::FP, &params);
        let covs = vec![r.clone(); 22 * 22];
        let replicas = 8;
        let mut sums = vec![DMatrix::<Complex64>::zeros(18, 18); 36];
        for rep in 0..replicas {
            let draws = crate::simulation::sample_stack(&covs, 1, 77 + rep).unwrap();
            let data: Vec<Complex32> = draws.concat().iter().map(|v| Complex32::new(v.re as f32, v.im as f32)).collect();
            let s = TomoStack::new(22, 22, PolMode::FP, stack.geometry.clone(), data).unwrap();
            let cov = estimate_covariance(&s, 11).unwrap();
            for (i, (rr, cc)) in (8..14).flat_map(|a| (8..14).map(move |b| (a, b))).enumerate() {
                sums[i] += cov.matrix(rr, cc);
            }
        }
        let inv = Complex64::new(1.0 / replicas as f64, 0.0);
        let errs: Vec<f64> = sums.iter().map(|m| crate::simulation::relative_frobenius(&(m * inv), &r)).collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mean <= 0.10, "mean relative error {mean}");
    }

    #[test]
    fn normalization_properties() {
        let mut cube = FeatureCube {
            rows: 4,
            cols: 5,
            channels: 3,
            names: vec!["a".into(), "b".into(), "c".into()],
            data: (0..60).map(|i| (i as f64 * 0.37).sin() * 10.0 + 3.0).collect(),
        };
        for px in 0..20 {
            cube.data[px * 3 + 1] = 0.1;
        }
        let (norm, stats) = normalize_features(&cube, None).unwrap();
        for px in 0..20 {
            assert_eq!(norm.data[px * 3 + 1], 0.0, "constant channel maps to zero");
        }
        let mean0: f64 = (0..20).map(|px| norm.data[px * 3]).sum::<f64>() / 20.0;
        assert!(mean0.abs() < 1e-6);
        let (twice, _) = normalize_features(&norm, Some(&stats)).unwrap();
        assert_ne!(twice, norm, "applying saved statistics twice differs from once");
        let mut mask = Grid::filled(4, 5, false);
        mask.data[..5].iter_mut().for_each(|m| *m = true);
        let partial = FeatureStats::compute(&cube, Some(&mask)).unwrap();
        assert_ne!(partial, stats);
        assert!(FeatureStats::compute(&cube, Some(&Grid::filled(4, 5, false))).is_err());
    }
}
