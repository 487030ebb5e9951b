/// Bilinear resize of `channels` planes of `h x w` to `out_h x out_w` with
/// half-pixel centers; sample positions outside the image clamp to the border.
pub fn resize_bilinear(
    src: &[f32],
    channels: usize,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<f32> {
    assert_eq!(src.len(), channels * h * w, "resize source length");
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for plane in src.chunks_exact(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::bilinear::sample_point;

    #[test]
    fn checkerboard_matches_sampling_kernel() {
        let board = [1.0f32, 0.0, 0.0, 1.0];
        let out = resize_bilinear(&board, 1, (2, 2), (4, 4));
        for i in 0..4 {
            for j in 0..4 {
                let y = (i as f64 + 0.5) * 0.5 - 0.5;
                let x = (j as f64 + 0.5) * 0.5 - 0.5;
                let board64: Vec<f64> = board.iter().map(|&v| v as f64).collect();
                let expected = sample_point(&board64, 2, 2, y, x);
                assert!((out[i * 4 + j] as f64 - expected).abs() < 1e-6, "({i},{j})");
            }
        }
        assert_eq!(out[0], 1.0);
        assert_eq!(out[5], 0.625);
    }

    #[test]
    fn same_size_is_identity() {
        let src: Vec<f32> = (0..2 * 3 * 5).map(|i| i as f32 / 30.0).collect();
        assert_eq!(resize_bilinear(&src, 2, (3, 5), (3, 5)), src);
    }
}
