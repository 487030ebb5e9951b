//! Zero-mean, unit-variance normalization of contiguous rows.
//!
//! Layer norm uses rows along the channel axis; the per-channel variant uses
//! rows along the flattened spatial axis. Both share these two kernels and
//! differ only in how the affine parameters are indexed.

use crate::tensor::Real;

/// Returns `(x_hat, inv_std)` with one `inv_std` per row.
pub fn normalize_rows<T: Real>(x: &[T], row_len: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / row_len;
    let n = T::of(row_len as f64);
    let mut x_hat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for (src, dst) in x.chunks_exact(row_len).zip(x_hat.chunks_exact_mut(row_len)) {
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
        inv_std.push(inv);
    }
    (x_hat, inv_std)
}

/// Input gradient given the gradient w.r.t. `x_hat`.
pub fn normalize_rows_backward<T: Real>(grad_x_hat: &[T], x_hat: &[T], inv_std: &[T], row_len: usize) -> Vec<T> {
    let n = T::of(row_len as f64);
    let mut grad = vec![T::zero(); x_hat.len()];
    for (r, ((g, xh), out)) in grad_x_hat
        .chunks_exact(row_len)
        .zip(x_hat.chunks_exact(row_len))
        .zip(grad.chunks_exact_mut(row_len))
        .enumerate()
    {
        let mean_g = g.iter().copied().sum::<T>() / n;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((o, &gi), &xi) in out.iter_mut().zip(g).zip(xh) {
            *o = inv_std[r] * (gi - mean_g - xi * mean_gx);
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_element_row() {
        let (xh, _) = normalize_rows(&[1.0f64, 3.0], 2, 1e-15);
        assert!((xh[0] + 1.0).abs() < 1e-12 && (xh[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_row_maps_to_zeros() {
        let (xh, _) = normalize_rows(&[4.0f64; 5], 5, 1e-5);
        assert!(xh.iter().all(|&v| v == 0.0));
    }
}
