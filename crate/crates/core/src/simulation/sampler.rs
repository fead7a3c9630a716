//! Circular complex Gaussian draws `y ~ CN(0, R)`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Lower-triangular `L` with `L L† = R` for a PSD Hermitian `R`.
///
/// Pivots below `1e-12 · tr(R)` are treated as zero and their column is
/// dropped, so rank-deficient inputs factor without jitter. A pivot below
/// `-1e-10 · tr(R)` is reported as [`Error::NotPsd`].
pub fn psd_factor(r: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    let n = r.nrows();
    if r.ncols() != n {
        return Err(Error::Shape("covariance must be square".into()));
    }
    let trace = r.trace().re.abs().max(f64::MIN_POSITIVE);
    let mut l = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for j in 0..n {
        let mut d = r[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if d < -1e-10 * trace {
            return Err(Error::NotPsd(d / trace));
        }
        if d <= 1e-12 * trace {
            continue;
        }
        let piv = d.sqrt();
        l[(j, j)] = Complex64::new(piv, 0.0);
        for i in j + 1..n {
            let mut s = r[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / piv;
        }
    }
    Ok(l)
}

/// Independent per-pixel random stream derived from `(seed, pixel)`, so
/// draws do not depend on iteration order or thread count.
pub fn pixel_rng(seed: u64, pixel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel);
    rng
}

/// Standard circular complex normal: real and imaginary parts N(0, 1/2).
pub fn complex_normal<R: Rng>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Draws `looks` realizations of `CN(0, L L†)` into `out` (look-major).
pub fn draw_with_factor<R: Rng>(l: &DMatrix<Complex64>, looks: usize, rng: &mut R, out: &mut Vec<Complex64>) {
    let n = l.nrows();
    let mut z = vec![Complex64::new(0.0, 0.0); n];
    for _ in 0..looks {
        z.iter_mut().for_each(|v| *v = complex_normal(rng));
        for i in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..=i {
                acc += l[(i, k)] * z[k];
            }
            out.push(acc);
        }
    }
}

/// Samples `looks` i.i.d. realizations per pixel. The result holds one
/// vector per pixel laid out `[look][channel]`.
pub fn sample_stack(
    covariances: &[DMatrix<Complex64>],
    looks: usize,
    seed: u64,
) -> Result<Vec<Vec<Complex64>>> {
    covariances
        .par_iter()
        .enumerate()
        .map(|(px, r)| {
            let l = psd_factor(r)?;
            let mut rng = pixel_rng(seed, px as u64);
            let mut out = Vec::with_capacity(looks * r.nrows());
            draw_with_factor(&l, looks, &mut rng, &mut out);
            Ok(out)
        })
        .collect()
}

/// Sample covariance `(1/L) Σ y y†` of look-major realizations.
pub fn sample_covariance(samples: &[Complex64], dim: usize) -> DMatrix<Complex64> {
    let looks = samples.len() / dim;
    let mut c = DMatrix::from_element(dim, dim, Complex64::new(0.0, 0.0));
    for y in samples.chunks_exact(dim) {
        for i in 0..dim {
            for j in 0..dim {
                c[(i, j)] += y[i] * y[j].conj();
            }
        }
    }
    c / Complex64::new(looks as f64, 0.0)
}

pub fn relative_frobenius(estimate: &DMatrix<Complex64>, truth: &DMatrix<Complex64>) -> f64 {
    (estimate - truth).norm() / truth.norm()
}
