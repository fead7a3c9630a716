use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Step-decayed learning rate `lr0 · factor^⌊epoch / period⌋`.
pub fn lr_at(epoch: usize, lr0: f64, factor: f64, period: usize) -> f64 {
    lr0 * factor.powi((epoch / period.max(1)) as i32)
}

/// SGD with momentum: `v ← μ·v + g`, `w ← w − lr·v`. Every gradient is
/// checked before any parameter moves, so a rejected step leaves the state
/// untouched.
pub fn sgd_step<T: Scalar>(
    params: &mut [Vec<T>],
    velocity: &mut [Vec<T>],
    grads: &[Vec<T>],
    names: &[String],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || velocity.len() != grads.len() {
        return Err(Error::Shape("gradient list does not match the parameters".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
        if p.len() != g.len() || velocity[i].len() != g.len() {
            return Err(Error::Shape(format!("gradient shape mismatch for `{name}`")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    let (lr, mu) = (T::from_f64(lr), T::from_f64(momentum));
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        for ((w, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = mu * *vi + *gi;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_at(0, 0.01, 0.5, 200), 0.01);
        assert_eq!(lr_at(199, 0.01, 0.5, 200), 0.01);
        assert_eq!(lr_at(200, 0.01, 0.5, 200), 0.005);
        assert_eq!(lr_at(399, 0.01, 0.5, 200), 0.005);
        assert_eq!(lr_at(400, 0.01, 0.5, 200), 0.0025);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![vec![1.0f64, -2.0]];
        let mut v = vec![vec![0.0; 2]];
        sgd_step(&mut p, &mut v, &[vec![0.0; 2]], &names(1), 0.1, 0.9).unwrap();
        assert_eq!(p, vec![vec![1.0, -2.0]]);
    }

    #[test]
    fn no_momentum_is_plain_descent() {
        let mut p = vec![vec![1.0f64]];
        let mut v = vec![vec![0.0]];
        sgd_step(&mut p, &mut v, &[vec![0.5]], &names(1), 0.1, 0.0).unwrap();
        assert_eq!(p[0][0], 1.0 - 0.1 * 0.5);
    }

    #[test]
    fn two_constant_steps_unroll() {
        // v1 = g, v2 = 0.9 g + g: displacement lr·g·(1 + 1.9).
        let (lr, g) = (0.01, 0.3);
        let mut p = vec![vec![0.0f64]];
        let mut v = vec![vec![0.0]];
        for _ in 0..2 {
            sgd_step(&mut p, &mut v, &[vec![g]], &names(1), lr, 0.9).unwrap();
        }
        assert!((p[0][0] + lr * g * 2.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = vec![vec![1.0f32], vec![2.0]];
        let mut v = vec![vec![0.0], vec![0.0]];
        let err = sgd_step(&mut p, &mut v, &[vec![0.1], vec![f32::NAN]], &names(2), 0.1, 0.9).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p1"));
        assert_eq!(p, vec![vec![1.0], vec![2.0]]);
    }
}
