//! Softmax cross-entropy with an ignore label, over one or more class
//! groups sharing a logit map.

use super::scalar::Scalar;
use crate::dataset::IGNORE;
use crate::error::{Error, Result};

/// Per-pixel softmax over `classes` logits stored with stride `stride`.
/// Returns `log Σ exp(h_j − max)` and `max`.
fn softmax_at<T: Scalar>(logits: &[T], base: usize, stride: usize, classes: usize, probs: &mut [T]) -> (T, T) {
    let mut max = logits[base];
    for j in 1..classes {
        let v = logits[base + j * stride];
        if v > max {
            max = v;
        }
    }
    let mut sum = T::ZERO;
    for (j, p) in probs.iter_mut().enumerate().take(classes) {
        *p = (logits[base + j * stride] - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut().take(classes) {
        *p = *p / sum;
    }
    (sum.ln(), max)
}

/// Mean cross-entropy over non-ignored pixels and its gradient with respect
/// to the logits. `logits` is pixel-major `[P, K]`, `labels` is `[P]` with
/// values in `[−1, K−1]`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], labels: &[i32], classes: usize) -> Result<(T, Vec<T>)> {
    assert_eq!(logits.len(), labels.len() * classes, "logits must be [pixels, classes]");
    let valid = labels.iter().filter(|l| **l != IGNORE).count();
    if valid == 0 {
        return Err(Error::Empty("every pixel carries the ignore label".into()));
    }
    let mut grad = vec![T::ZERO; logits.len()];
    let mut probs = vec![T::ZERO; classes];
    let inv = T::ONE / T::from_f64(valid as f64);
    let mut loss = T::ZERO;
    for (p, &label) in labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        check_label(label, classes)?;
        let base = p * classes;
        let (lse, max) = softmax_at(logits, base, 1, classes, &mut probs);
        loss += lse - (logits[base + label as usize] - max);
        for j in 0..classes {
            grad[base + j] = probs[j] * inv;
        }
        grad[base + label as usize] -= inv;
    }
    Ok((loss * inv, grad))
}

fn check_label(label: i32, classes: usize) -> Result<()> {
    if label < 0 || label as usize >= classes {
        return Err(Error::Shape(format!("label {label} outside [0, {classes})")));
    }
    Ok(())
}

/// Softmax probabilities of a pixel-major `[P, K]` logit array.
pub fn softmax<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; logits.len()];
    for (p, chunk) in out.chunks_exact_mut(classes).enumerate() {
        softmax_at(logits, p * classes, 1, classes, chunk);
    }
    out
}

/// Valid-pixel count of each head in `[.., heads]` labels.
pub fn head_counts(labels: &[i32], heads: usize) -> Vec<usize> {
    let mut counts = vec![0; heads];
    for px in labels.chunks_exact(heads) {
        for (c, l) in counts.iter_mut().zip(px) {
            if *l != IGNORE {
                *c += 1;
            }
        }
    }
    counts
}

/// Grouped cross-entropy on one channel-major image: `logits` is
/// `[ΣK, P]`, `labels` is `[P, heads]`. Each group's loss is scaled by
/// `scale[g]` (the reciprocal of its valid-pixel count over the batch).
/// Writes the gradient into `grad` and returns the scaled loss.
pub(crate) fn grouped_ce_chw<T: Scalar>(
    logits: &[T],
    labels: &[i32],
    groups: &[usize],
    scale: &[T],
    grad: &mut [T],
) -> Result<T> {
    let heads = groups.len();
    let pixels = labels.len() / heads;
    grad.iter_mut().for_each(|g| *g = T::ZERO);
    let mut probs = vec![T::ZERO; groups.iter().copied().max().unwrap_or(0)];
    let mut total = T::ZERO;
    let mut offset = 0;
    for (h, &k) in groups.iter().enumerate() {
        let mut loss = T::ZERO;
        for p in 0..pixels {
            let label = labels[p * heads + h];
            if label == IGNORE {
                continue;
            }
            check_label(label, k)?;
            let base = offset * pixels + p;
            let (lse, max) = softmax_at(logits, base, pixels, k, &mut probs);
            loss += lse - (logits[base + label as usize * pixels] - max);
            for j in 0..k {
                grad[base + j * pixels] = probs[j] * scale[h];
            }
            grad[base + label as usize * pixels] -= scale[h];
        }
        total += loss * scale[h];
        offset += k;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in [2usize, 5, 60] {
            let (loss, _) = softmax_cross_entropy(&vec![0.3f64; 4 * k], &[0, 1, 1, 0], k).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_true_class_tends_to_zero() {
        let (loss, _) = softmax_cross_entropy(&[60.0f64, 0.0, 0.0], &[0], 3).unwrap();
        assert!(loss < 1e-20);
        let (loss, _) = softmax_cross_entropy(&[1e4f64, 0.0], &[0], 2).unwrap();
        assert!(loss.is_finite() && loss == 0.0);
    }

    #[test]
    fn all_ignored_is_an_error() {
        assert!(softmax_cross_entropy(&[0.0f64; 4], &[-1, -1], 2).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        // Random 2-class 4x4 case; one ignored pixel.
        let logits: Vec<f64> = (0..32).map(|i| ((i * 7 + 3) as f64 * 0.61).sin() * 2.0).collect();
        let labels: Vec<i32> = (0..16).map(|i| if i == 5 { -1 } else { (i * 3 % 2) as i32 }).collect();
        let (_, grad) = softmax_cross_entropy(&logits, &labels, 2).unwrap();
        let eps = 1e-6;
        for i in 0..32 {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p[i] += eps;
            m[i] -= eps;
            let fd = (softmax_cross_entropy(&p, &labels, 2).unwrap().0 - softmax_cross_entropy(&m, &labels, 2).unwrap().0) / (2.0 * eps);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(grad[i].abs()).max(1e-2), "{i}: {fd} vs {}", grad[i]);
        }
        assert!(grad[10..12].iter().all(|g| *g == 0.0), "ignored pixel has no gradient");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits: Vec<f32> = (0..40).map(|i| (i as f32 * 1.3).cos() * 30.0).collect();
        for row in softmax(&logits, 8).chunks_exact(8) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn groups_do_not_exchange_gradient() {
        // Two groups (3 and 2 classes) on 4 pixels; CHM labels only.
        let logits: Vec<f64> = (0..20).map(|i| (i as f64 * 0.9).sin()).collect();
        let labels = vec![0, -1, 2, -1, 1, -1, 0, -1];
        let mut grad = vec![1.0; 20];
        grouped_ce_chw(&logits, &labels, &[3, 2], &[0.25, 1.0], &mut grad).unwrap();
        assert!(grad[..12].iter().any(|g| *g != 0.0));
        assert!(grad[12..].iter().all(|g| *g == 0.0));
        // Per group, each pixel's gradient sums to zero.
        for p in 0..4 {
            let s: f64 = (0..3).map(|j| grad[j * 4 + p]).sum();
            assert!(s.abs() < 1e-15);
        }
    }
}
