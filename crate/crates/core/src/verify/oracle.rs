//! Straightforward reference implementations, written independently of the
//! optimized kernels they are compared against.

use crate::tensor::Conv2dParams;

/// Shapes of a direct convolution: input `[n,c,h,w]`, weight `[o,c/g,k,k]`.
#[derive(Clone, Copy, Debug)]
pub struct NaiveConv {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub p: Conv2dParams,
}

impl NaiveConv {
    pub fn out_hw(&self) -> (usize, usize) {
        let span = self.p.dilation * (self.k - 1) + 1;
        (
            (self.h + 2 * self.p.padding - span) / self.p.stride + 1,
            (self.w + 2 * self.p.padding - span) / self.p.stride + 1,
        )
    }

    /// Calls `f(out_index, in_index, weight_index)` for every multiply of the
    /// convolution; out-of-bounds taps (zero padding) are skipped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = self.out_hw();
        let cg = self.c / self.p.groups;
        let og = self.o / self.p.groups;
        for b in 0..self.n {
            for oc in 0..self.o {
                let g = oc / og;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let out = ((b * self.o + oc) * oh + oy) * ow + ox;
                        for ic in 0..cg {
                            for ky in 0..self.k {
                                for kx in 0..self.k {
                                    let iy =
                                        (oy * self.p.stride + ky * self.p.dilation) as isize - self.p.padding as isize;
                                    let ix =
                                        (ox * self.p.stride + kx * self.p.dilation) as isize - self.p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                                        continue;
                                    }
                                    let chan = g * cg + ic;
                                    let inp = ((b * self.c + chan) * self.h + iy as usize) * self.w + ix as usize;
                                    let wi = ((oc * cg + ic) * self.k + ky) * self.k + kx;
                                    f(out, inp, wi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (oh, ow) = self.out_hw();
        let mut y = vec![0.0; self.n * self.o * oh * ow];
        self.for_each_tap(|o, i, w| y[o] += x[i] * weight[w]);
        if let Some(bias) = bias {
            for (idx, v) in y.iter_mut().enumerate() {
                *v += bias[(idx / (oh * ow)) % self.o];
            }
        }
        y
    }

    /// Adjoint of [`Self::forward`]: gradients of input, weight and bias.
    pub fn backward(&self, x: &[f64], weight: &[f64], gy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (oh, ow) = self.out_hw();
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; weight.len()];
        let mut gb = vec![0.0; self.o];
        self.for_each_tap(|o, i, w| {
            gx[i] += gy[o] * weight[w];
            gw[w] += gy[o] * x[i];
        });
        for (idx, g) in gy.iter().enumerate() {
            gb[(idx / (oh * ow)) % self.o] += g;
        }
        (gx, gw, gb)
    }
}

/// Metrics recomputed from a confusion matrix by direct evaluation of the
/// definitions, sharing no code with [`crate::train::metrics`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceMetrics {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `[tp, fp, fn, tn]` per class.
    pub counts: Vec<[u64; 4]>,
}

pub fn reference_metrics(m: &[Vec<u64>]) -> ReferenceMetrics {
    let k = m.len();
    let mut total = 0u64;
    let mut diag = 0u64;
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            total += v;
            if i == j {
                diag += v;
            }
        }
    }
    let mut out = ReferenceMetrics {
        accuracy: if total == 0 { 0.0 } else { diag as f64 / total as f64 },
        precision: Vec::new(),
        recall: Vec::new(),
        f1: Vec::new(),
        macro_precision: 0.0,
        macro_recall: 0.0,
        macro_f1: 0.0,
        counts: Vec::new(),
    };
    let mut present = 0usize;
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = m[c][c];
        let mut fp = 0;
        let mut fn_ = 0;
        for other in 0..k {
            if other != c {
                fp += m[other][c];
                fn_ += m[c][other];
            }
        }
        let tn = total - tp - fp - fn_;
        let p = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let r = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        if tp + fp + fn_ > 0 {
            present += 1;
            sp += p;
            sr += r;
            sf += f;
        }
        out.precision.push(p);
        out.recall.push(r);
        out.f1.push(f);
        out.counts.push([tp, fp, fn_, tn]);
    }
    if present > 0 {
        out.macro_precision = sp / present as f64;
        out.macro_recall = sr / present as f64;
        out.macro_f1 = sf / present as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_on_ones_image() {
        let conv = NaiveConv {
            n: 1,
            c: 1,
            h: 3,
            w: 3,
            o: 1,
            k: 3,
            p: Conv2dParams::default(),
        };
        assert_eq!(conv.forward(&[1.0; 9], &[2.0; 9], None), vec![18.0]);
    }

    #[test]
    fn binary_reference() {
        let r = reference_metrics(&[vec![8, 4], vec![2, 6]]);
        assert_eq!(r.counts[0], [8, 2, 4, 6]);
        assert_eq!(r.accuracy, 0.7);
    }
}
