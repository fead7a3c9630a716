//! Row-major 2-D grids and clipped-window box filtering.

use std::ops::{Add, Mul};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Grid {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} grid needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Grid { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> &T {
        &self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// Copies the rectangle `[r0, r0+h) x [c0, c0+w)`.
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Grid<T> {
        assert!(r0 + h <= self.rows && c0 + w <= self.cols, "crop out of bounds");
        let mut data = Vec::with_capacity(h * w);
        for r in r0..r0 + h {
            data.extend_from_slice(&self.data[r * self.cols + c0..r * self.cols + c0 + w]);
        }
        Grid { rows: h, cols: w, data }
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Inclusive-exclusive index range of a window of side `window` centred on
/// `i`, clipped to `[0, len)`.
#[inline]
pub(crate) fn clipped_range(i: usize, half: usize, len: usize) -> (usize, usize) {
    (i.saturating_sub(half), (i + half + 1).min(len))
}

/// Clipped-window box sums, computed separably (rows then columns) by
/// direct summation.
pub(crate) fn box_sum<T>(data: &[T], rows: usize, cols: usize, window: usize) -> Vec<T>
where
    T: Copy + Default + Add<Output = T>,
{
    let half = window / 2;
    let mut horiz = vec![T::default(); rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let (lo, hi) = clipped_range(c, half, cols);
            let mut acc = T::default();
            for v in &row[lo..hi] {
                acc = acc + *v;
            }
            horiz[r * cols + c] = acc;
        }
    }
    let mut out = vec![T::default(); rows * cols];
    for r in 0..rows {
        let (lo, hi) = clipped_range(r, half, rows);
        let dst = &mut out[r * cols..(r + 1) * cols];
        for rr in lo..hi {
            let src = &horiz[rr * cols..(rr + 1) * cols];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + *s;
            }
        }
    }
    out
}

/// Clipped-window box mean: each output is the mean over the part of the
/// window that lies inside the image.
pub(crate) fn box_mean<T>(data: &[T], rows: usize, cols: usize, window: usize) -> Vec<T>
where
    T: Copy + Default + Add<Output = T> + Mul<f64, Output = T>,
{
    let half = window / 2;
    let mut sums = box_sum(data, rows, cols, window);
    for r in 0..rows {
        let (rlo, rhi) = clipped_range(r, half, rows);
        for c in 0..cols {
            let (clo, chi) = clipped_range(c, half, cols);
            let count = ((rhi - rlo) * (chi - clo)) as f64;
            let v = &mut sums[r * cols + c];
            *v = *v * (1.0 / count);
        }
    }
    sums
}

pub(crate) fn check_window(window: usize, rows: usize, cols: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid("window", format!("{window} is not an odd positive size")));
    }
    if window > rows || window > cols {
        return Err(Error::invalid(
            "window",
            format!("{window} exceeds the {rows}x{cols} image"),
        ));
    }
    Ok(())
}

/// Mirror index into `[0, len)` without repeating the edge sample
/// (`-1 -> 1`, `len -> len - 2`).
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_mean(data: &[f64], rows: usize, cols: usize, w: usize) -> Vec<f64> {
        let h = (w / 2) as isize;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows as isize {
            for c in 0..cols as isize {
                let (mut s, mut n) = (0.0, 0.0);
                for rr in r - h..=r + h {
                    for cc in c - h..=c + h {
                        if rr >= 0 && cc >= 0 && rr < rows as isize && cc < cols as isize {
                            s += data[(rr as usize) * cols + cc as usize];
                            n += 1.0;
                        }
                    }
                }
                out[(r as usize) * cols + c as usize] = s / n;
            }
        }
        out
    }

    #[test]
    fn box_mean_matches_double_loop() {
        let (rows, cols) = (7, 11);
        let data: Vec<f64> = (0..rows * cols).map(|i| ((i * 37) % 13) as f64 - 4.5).collect();
        for w in [1, 3, 5, 7] {
            let fast = box_mean(&data, rows, cols, w);
            let slow = brute_mean(&data, rows, cols, w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-7, 1), 0);
        assert_eq!(reflect_index(9, 3), 1);
    }

    #[test]
    fn window_validation() {
        assert!(check_window(3, 4, 4).is_ok());
        assert!(check_window(4, 8, 8).is_err());
        assert!(check_window(9, 8, 8).is_err());
    }
}
