//! Activations and softmax along an arbitrary axis.

use crate::tensor::Real;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximation GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_CUBIC) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(SQRT_2_OVER_PI);
    let a = T::of(GELU_CUBIC);
    let t = (c * (x + a * x * x * x)).tanh();
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Decomposes `shape` around `axis` into `(outer, dim, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax over the middle extent of an `(outer, dim, inner)` layout.
pub fn softmax<T: Real>(x: &[T], (outer, dim, inner): (usize, usize, usize)) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |d: usize| (o * dim + d) * inner + i;
            let max = (0..dim).map(|d| x[at(d)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for d in 0..dim {
                let e = (x[at(d)] - max).exp();
                y[at(d)] = e;
                total += e;
            }
            for d in 0..dim {
                y[at(d)] /= total;
            }
        }
    }
    y
}

/// Input gradient of softmax from its output `y` and upstream `g`.
pub fn softmax_backward<T: Real>(y: &[T], g: &[T], (outer, dim, inner): (usize, usize, usize)) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |d: usize| (o * dim + d) * inner + i;
            let dot: T = (0..dim).map(|d| y[at(d)] * g[at(d)]).sum();
            for d in 0..dim {
                dx[at(d)] = y[at(d)] * (g[at(d)] - dot);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-9);
        assert!(gelu(-10.0f64).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!((sigmoid(800.0f64) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_middle_axis() {
        // shape [2,3,2], axis 1
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.3).collect();
        let y = softmax(&x, (2, 3, 2));
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|d| y[(o * 3 + d) * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
