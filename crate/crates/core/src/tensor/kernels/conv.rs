//! 2-D convolution by explicit patch gathering (im2col) followed by GEMM.

use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Stride/padding/dilation/groups of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Conv2dParams {
            stride,
            padding,
            dilation,
            groups,
        }
    }

    /// `floor((n + 2p - d(k-1) - 1)/s) + 1`, or `None` when non-positive.
    pub fn output_extent(&self, n: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = n + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Fully resolved shapes of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub params: Conv2dParams,
}

impl ConvGeometry {
    pub fn resolve(input: &[usize], weight: &[usize], params: Conv2dParams) -> Result<Self> {
        let [batch, in_channels, height, width] = *input else {
            return Err(Error::invalid(format!("conv2d input must be [B,C,H,W], got {input:?}")));
        };
        let [out_channels, per_group, kh, kw] = *weight else {
            return Err(Error::invalid(format!(
                "conv2d weight must be [Co,Ci,k,k], got {weight:?}"
            )));
        };
        if kh != kw || kh == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel must be square and non-empty, got {kh}x{kw}"
            )));
        }
        if params.stride == 0 || params.dilation == 0 || params.groups == 0 {
            return Err(Error::invalid("conv2d stride, dilation and groups must be >= 1"));
        }
        if per_group * params.groups != in_channels {
            return Err(Error::invalid(format!(
                "conv2d weight expects {per_group}x{} input channels, input has {in_channels}",
                params.groups
            )));
        }
        if out_channels % params.groups != 0 {
            return Err(Error::invalid(format!(
                "conv2d out channels {out_channels} not divisible by groups {}",
                params.groups
            )));
        }
        let (Some(out_height), Some(out_width)) = (params.output_extent(height, kh), params.output_extent(width, kh))
        else {
            return Err(Error::invalid(format!(
                "conv2d output extent is non-positive for {height}x{width} input, k={kh}, {params:?}"
            )));
        };
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel: kh,
            out_height,
            out_width,
            params,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_height, self.out_width]
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.params.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.params.groups
    }

    fn patch_len(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    fn out_area(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Multiply-accumulate count of the forward pass.
    pub fn macs(&self) -> u64 {
        (self.batch * self.out_channels * self.out_area() * self.patch_len()) as u64
    }

    /// Source row/col of a kernel tap for an output coordinate, if inside the image.
    #[inline]
    fn source(&self, out: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.params.stride + tap * self.params.dilation) as isize - self.params.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Gathers the patches of one (batch, group) slice into `cols[patch_len, out_area]`.
    fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let (k, area) = (self.kernel, self.out_area());
        let plane = self.height * self.width;
        for c in 0..self.in_per_group() {
            let src = &image[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * area..(row + 1) * area];
                    for oy in 0..self.out_height {
                        let sy = self.source(oy, ky, self.height);
                        for ox in 0..self.out_width {
                            dst[oy * self.out_width + ox] = match (sy, self.source(ox, kx, self.width)) {
                                (Some(y), Some(x)) => src[y * self.width + x],
                                _ => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back onto one (batch, group) image slice.
    fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let (k, area) = (self.kernel, self.out_area());
        let plane = self.height * self.width;
        for c in 0..self.in_per_group() {
            let dst = &mut image[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * area..(row + 1) * area];
                    for oy in 0..self.out_height {
                        let Some(y) = self.source(oy, ky, self.height) else {
                            continue;
                        };
                        for ox in 0..self.out_width {
                            if let Some(x) = self.source(ox, kx, self.width) {
                                dst[y * self.width + x] += src[oy * self.out_width + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn forward<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (groups, cin_g, cout_g) = (g.params.groups, g.in_per_group(), g.out_per_group());
    let (plen, area) = (g.patch_len(), g.out_area());
    let in_plane = g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.out_channels * area];
    let mut cols = vec![T::zero(); plen * area];
    for b in 0..g.batch {
        for grp in 0..groups {
            let img_off = (b * g.in_channels + grp * cin_g) * in_plane;
            g.im2col(&input[img_off..img_off + cin_g * in_plane], &mut cols);
            let w = &weight[grp * cout_g * plen..(grp + 1) * cout_g * plen];
            let out_off = (b * g.out_channels + grp * cout_g) * area;
            gemm(
                cout_g,
                plen,
                area,
                w,
                false,
                &cols,
                false,
                &mut out[out_off..out_off + cout_g * area],
                false,
            );
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                let off = (b * g.out_channels + co) * area;
                out[off..off + area].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients for (input, weight, bias) given the upstream gradient.
pub fn backward<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], grad_out: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (groups, cin_g, cout_g) = (g.params.groups, g.in_per_group(), g.out_per_group());
    let (plen, area) = (g.patch_len(), g.out_area());
    let in_plane = g.height * g.width;
    let mut grad_in = vec![T::zero(); input.len()];
    let mut grad_w = vec![T::zero(); weight.len()];
    let mut grad_b = vec![T::zero(); g.out_channels];
    let mut cols = vec![T::zero(); plen * area];
    let mut dcols = vec![T::zero(); plen * area];
    for b in 0..g.batch {
        for co in 0..g.out_channels {
            let off = (b * g.out_channels + co) * area;
            grad_b[co] += grad_out[off..off + area].iter().copied().sum();
        }
        for grp in 0..groups {
            let img_off = (b * g.in_channels + grp * cin_g) * in_plane;
            let img_len = cin_g * in_plane;
            g.im2col(&input[img_off..img_off + img_len], &mut cols);
            let w_range = grp * cout_g * plen..(grp + 1) * cout_g * plen;
            let out_off = (b * g.out_channels + grp * cout_g) * area;
            let gout = &grad_out[out_off..out_off + cout_g * area];
            // dW[cout_g, plen] += gout[cout_g, area] * cols[plen, area]^T
            gemm(
                cout_g,
                area,
                plen,
                gout,
                false,
                &cols,
                true,
                &mut grad_w[w_range.clone()],
                true,
            );
            // dcols[plen, area] = W[cout_g, plen]^T * gout[cout_g, area]
            gemm(
                plen,
                cout_g,
                area,
                &weight[w_range],
                true,
                gout,
                false,
                &mut dcols,
                false,
            );
            g.col2im(&dcols, &mut grad_in[img_off..img_off + img_len]);
        }
    }
    (grad_in, grad_w, grad_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        let p = Conv2dParams::new(2, 1, 1, 1);
        assert_eq!(p.output_extent(4, 3), Some(2));
        assert_eq!(Conv2dParams::default().output_extent(2, 3), None);
        assert_eq!(Conv2dParams::new(4, 2, 1, 1).output_extent(32, 5), Some(8));
        assert_eq!(Conv2dParams::new(1, 2, 2, 1).output_extent(1, 3), Some(1));
    }

    #[test]
    fn resolve_rejects_channel_mismatch_and_empty_output() {
        let p = Conv2dParams::default();
        assert!(ConvGeometry::resolve(&[1, 3, 4, 4], &[2, 2, 1, 1], p).is_err());
        assert!(ConvGeometry::resolve(&[1, 1, 2, 2], &[1, 1, 3, 3], p).is_err());
        assert!(ConvGeometry::resolve(&[1, 4, 4, 4], &[3, 2, 1, 1], Conv2dParams::new(1, 0, 1, 2)).is_err());
    }

    #[test]
    fn one_by_one_scaling() {
        let g = ConvGeometry::resolve(&[1, 1, 3, 3], &[1, 1, 1, 1], Conv2dParams::default()).unwrap();
        let out = forward(&g, &[1.0f64; 9], &[2.0], Some(&[0.0]));
        assert_eq!(out, vec![2.0; 9]);
    }
}
