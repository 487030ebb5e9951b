//! Bilinear sampling at fractional (row, col) coordinates with clamp-to-border.

use crate::tensor::Real;

/// Interpolation stencil for one coordinate pair.
#[derive(Clone, Copy, Debug)]
struct Stencil<T> {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    wy: T,
    wx: T,
    /// d(clamped)/d(raw): 1 inside the valid range, 0 where clamping is active.
    dy: T,
    dx: T,
}

#[inline]
fn axis<T: Real>(v: T, extent: usize) -> (usize, usize, T, T) {
    let hi = T::of((extent - 1) as f64);
    let (c, d) = if v < T::zero() {
        (T::zero(), T::zero())
    } else if v > hi {
        (hi, T::zero())
    } else {
        (v, T::one())
    };
    let lo = c.floor().as_f64() as usize;
    let lo = lo.min(extent - 1);
    let up = (lo + 1).min(extent - 1);
    (lo, up, c - T::of(lo as f64), d)
}

impl<T: Real> Stencil<T> {
    #[inline]
    fn new(y: T, x: T, h: usize, w: usize) -> Self {
        let (y0, y1, wy, dy) = axis(y, h);
        let (x0, x1, wx, dx) = axis(x, w);
        Stencil {
            y0,
            y1,
            x0,
            x1,
            wy,
            wx,
            dy,
            dx,
        }
    }

    #[inline]
    fn corners(&self, w: usize) -> [(usize, T); 4] {
        let one = T::one();
        [
            (self.y0 * w + self.x0, (one - self.wy) * (one - self.wx)),
            (self.y0 * w + self.x1, (one - self.wy) * self.wx),
            (self.y1 * w + self.x0, self.wy * (one - self.wx)),
            (self.y1 * w + self.x1, self.wy * self.wx),
        ]
    }

    #[inline]
    fn eval(&self, plane: &[T], w: usize) -> T {
        self.corners(w).iter().map(|&(i, wt)| plane[i] * wt).sum()
    }
}

/// Samples one `h x w` plane at `(y, x)`.
pub fn sample_point<T: Real>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    Stencil::new(y, x, h, w).eval(plane, w)
}

/// `input[B,C,H,W]`, `coords[B,L,2]` → `[B,C,L]`.
pub fn forward<T: Real>(input: &[T], dims: [usize; 4], coords: &[T], points: usize) -> Vec<T> {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let mut out = vec![T::zero(); b * c * points];
    for bi in 0..b {
        for l in 0..points {
            let at = (bi * points + l) * 2;
            let st = Stencil::new(coords[at], coords[at + 1], h, w);
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                out[(bi * c + ci) * points + l] = st.eval(&input[off..off + plane], w);
            }
        }
    }
    out
}

/// Gradients w.r.t. `(input, coords)`.
pub fn backward<T: Real>(
    input: &[T],
    dims: [usize; 4],
    coords: &[T],
    points: usize,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let one = T::one();
    let mut grad_in = vec![T::zero(); input.len()];
    let mut grad_coords = vec![T::zero(); coords.len()];
    for bi in 0..b {
        for l in 0..points {
            let at = (bi * points + l) * 2;
            let st = Stencil::new(coords[at], coords[at + 1], h, w);
            let corners = st.corners(w);
            let (mut gy, mut gx) = (T::zero(), T::zero());
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                let g = grad_out[(bi * c + ci) * points + l];
                for &(i, wt) in &corners {
                    grad_in[off + i] += g * wt;
                }
                let p = &input[off..off + plane];
                let v00 = p[st.y0 * w + st.x0];
                let v01 = p[st.y0 * w + st.x1];
                let v10 = p[st.y1 * w + st.x0];
                let v11 = p[st.y1 * w + st.x1];
                gy += g * ((one - st.wx) * (v10 - v00) + st.wx * (v11 - v01));
                gx += g * ((one - st.wy) * (v01 - v00) + st.wy * (v11 - v10));
            }
            grad_coords[at] = gy * st.dy;
            grad_coords[at + 1] = gx * st.dx;
        }
    }
    (grad_in, grad_coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_corner_average() {
        let plane = [1.0f64, 2.0, 3.0, 4.0];
        assert_eq!(sample_point(&plane, 2, 2, 0.5, 0.5), 2.5);
    }

    #[test]
    fn exact_at_nodes_and_clamped_outside() {
        let plane: Vec<f64> = (0..12).map(|i| i as f64 * 1.5).collect();
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(sample_point(&plane, 3, 4, y as f64, x as f64), plane[y * 4 + x]);
            }
        }
        assert_eq!(sample_point(&plane, 3, 4, -7.0, 100.0), plane[3]);
        assert_eq!(sample_point(&plane, 3, 4, 9.0, -0.2), plane[8]);
    }
}
