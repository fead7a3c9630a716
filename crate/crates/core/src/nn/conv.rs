//! Same-padded stride-1 convolution over single CHW images via im2col, plus
//! the ReLU, max-pool and nearest-upsample kernels around it.

use super::scalar::{gemm, Scalar};

/// Geometry of one convolution applied to an `h × w` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Unfolds `x` (`[c, h, w]`) into `[c·k·k, h·w]`, zero outside the image.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                // Output x range whose source column x + kx - pad is inside.
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                for y in 0..h {
                    let d = &mut dst[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h || x_lo >= x_hi {
                        d.fill(T::ZERO);
                        continue;
                    }
                    let s = &src[(sy - pad) * w..(sy - pad + 1) * w];
                    d[..x_lo].fill(T::ZERO);
                    d[x_hi..].fill(T::ZERO);
                    d[x_lo..x_hi].copy_from_slice(&s[x_lo + kx - pad..x_hi + kx - pad]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
pub fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let dst = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let d = &mut dst[(sy - pad) * w..(sy - pad + 1) * w];
                    let s = &src[y * w..(y + 1) * w];
                    for (dv, sv) in d[x_lo + kx - pad..x_hi + kx - pad].iter_mut().zip(&s[x_lo..x_hi]) {
                        *dv += *sv;
                    }
                }
            }
        }
    }
}

/// `out = W ⊛ x + b`; weight is `[cout, cin, k, k]`. `col` is scratch.
pub fn conv_forward<T: Scalar>(g: ConvGeom, x: &[T], weight: &[T], bias: &[T], col: &mut Vec<T>, out: &mut [T]) {
    let hw = g.hw();
    if g.k == 1 {
        gemm(g.cout, g.cin, hw, weight, false, x, false, out, false);
    } else {
        col.resize(g.col_rows() * hw, T::ZERO);
        im2col(x, g.cin, g.h, g.w, g.k, col);
        gemm(g.cout, g.col_rows(), hw, weight, false, col, false, out, false);
    }
    for (o, b) in out.chunks_exact_mut(hw).zip(bias) {
        o.iter_mut().for_each(|v| *v += *b);
    }
}

/// Accumulates weight and bias gradients; writes the input gradient into
/// `dx` when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    g: ConvGeom,
    x: &[T],
    dout: &[T],
    weight: &[T],
    col: &mut Vec<T>,
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    let hw = g.hw();
    let rows = g.col_rows();
    let unfolded: &[T] = if g.k == 1 {
        x
    } else {
        col.resize(rows * hw, T::ZERO);
        im2col(x, g.cin, g.h, g.w, g.k, col);
        col
    };
    gemm(g.cout, hw, rows, dout, false, unfolded, true, dw, true);
    for (b, d) in db.iter_mut().zip(dout.chunks_exact(hw)) {
        let mut acc = T::ZERO;
        for v in d {
            acc += *v;
        }
        *b += acc;
    }
    if let Some(dx) = dx {
        if g.k == 1 {
            gemm(g.cin, g.cout, hw, weight, true, dout, false, dx, false);
        } else {
            gemm(rows, g.cout, hw, weight, true, dout, false, col, false);
            dx.iter_mut().for_each(|v| *v = T::ZERO);
            col2im(col, g.cin, g.h, g.w, g.k, dx);
        }
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        if !(*v > T::ZERO) {
            *v = T::ZERO;
        }
    }
}

/// Zeroes `grad` where the ReLU output was not positive.
pub fn relu_backward<T: Scalar>(out: &[T], grad: &mut [T]) {
    for (g, o) in grad.iter_mut().zip(out) {
        if !(*o > T::ZERO) {
            *g = T::ZERO;
        }
    }
}

/// 2×2 stride-2 max pool; `idx` records the winning input offset of each
/// output (first maximum in row-major window order).
pub fn maxpool2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, out: &mut [T], idx: &mut [u32]) {
    let (ho, wo) = (h / 2, w / 2);
    for ci in 0..c {
        let base = ci * h * w;
        for y in 0..ho {
            for xo in 0..wo {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                let o = ci * ho * wo + y * wo + xo;
                out[o] = x[best];
                idx[o] = best as u32;
            }
        }
    }
}

pub fn maxpool2_backward<T: Scalar>(dout: &[T], idx: &[u32], dx: &mut [T]) {
    for (g, i) in dout.iter().zip(idx) {
        dx[*i as usize] += *g;
    }
}

/// Nearest-neighbour 2× upsampling of `[c, h, w]`.
pub fn upsample2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let w2 = 2 * w;
    for ci in 0..c {
        for y in 0..2 * h {
            let src = &x[ci * h * w + (y / 2) * w..ci * h * w + (y / 2 + 1) * w];
            let dst = &mut out[ci * 4 * h * w + y * w2..ci * 4 * h * w + (y + 1) * w2];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / 2];
            }
        }
    }
}

/// Adjoint of [`upsample2`]: sums each 2×2 block.
pub fn upsample2_backward<T: Scalar>(dout: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let w2 = 2 * w;
    for ci in 0..c {
        for y in 0..h {
            for xo in 0..w {
                let b = ci * 4 * h * w + 2 * y * w2 + 2 * xo;
                dx[ci * h * w + y * w + xo] = dout[b] + dout[b + 1] + dout[b + w2] + dout[b + w2 + 1];
            }
        }
    }
}
