//! Parameterized wrappers around the tape primitives.

use super::params::{Bindings, Initializer, ParamId};
use super::Module;
use crate::error::Result;
use crate::tensor::{Conv2dParams, Real, Tape, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Truncated-normal(0.02) weight, zero bias.
    pub fn new<T: Real>(init: &mut Initializer<T>, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Linear {
            weight: init.trunc_normal(&format!("{name}.weight"), &[dout, din], 0.02)?,
            bias: init.zeros(&format!("{name}.bias"), &[dout])?,
            in_features: din,
            out_features: dout,
        })
    }

    /// Zero weight and bias.
    pub fn zeroed<T: Real>(init: &mut Initializer<T>, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Linear {
            weight: init.zeros(&format!("{name}.weight"), &[dout, din])?,
            bias: init.zeros(&format!("{name}.bias"), &[dout])?,
            in_features: din,
            out_features: dout,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        tape.linear(x, p[self.weight], Some(p[self.bias]))
    }
}

impl Module for Linear {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub params: Conv2dParams,
}

impl Conv2d {
    /// Fan-in-scaled normal weight, zero bias.
    pub fn new<T: Real>(
        init: &mut Initializer<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        params: Conv2dParams,
    ) -> Result<Self> {
        let per_group = cin / params.groups;
        Ok(Conv2d {
            weight: init.fan_in_normal(
                &format!("{name}.weight"),
                &[cout, per_group, kernel, kernel],
                per_group * kernel * kernel,
            )?,
            bias: init.zeros(&format!("{name}.bias"), &[cout])?,
            in_channels: cin,
            out_channels: cout,
            kernel,
            params,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.weight], Some(p[self.bias]), self.params)
    }
}

impl Module for Conv2d {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    fn param_count(&self) -> usize {
        self.out_channels * (self.in_channels / self.params.groups) * self.kernel * self.kernel + self.out_channels
    }
}

/// Layer norm over the trailing (channel) axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(init: &mut Initializer<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: init.zeros(&format!("{name}.beta"), &[dim])?,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], T::of(NORM_EPS))
    }
}

impl Module for LayerNorm {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }

    fn param_count(&self) -> usize {
        2 * self.dim
    }
}

/// Per-channel normalization over spatial positions of a `[B,C,H,W]` map.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl ChannelNorm {
    pub fn new<T: Real>(init: &mut Initializer<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(ChannelNorm {
            gamma: init.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: init.zeros(&format!("{name}.beta"), &[channels])?,
            channels,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        tape.channel_norm(x, p[self.gamma], p[self.beta], T::of(NORM_EPS))
    }
}

impl Module for ChannelNorm {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }

    fn param_count(&self) -> usize {
        2 * self.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn declared_counts_match_stored_tensors() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Initializer::new(&mut store, 0);
        let lin = Linear::new(&mut init, "l", 4, 3).unwrap();
        let conv = Conv2d::new(&mut init, "c", 6, 4, 3, Conv2dParams::new(1, 1, 1, 2)).unwrap();
        let ln = LayerNorm::new(&mut init, "n", 5).unwrap();
        let cn = ChannelNorm::new(&mut init, "cn", 7).unwrap();
        assert_eq!(lin.param_count(), 15);
        assert_eq!(conv.param_count(), 4 * 3 * 9 + 4);
        assert_eq!(
            lin.param_count() + conv.param_count() + ln.param_count() + cn.param_count(),
            store.numel()
        );
    }

    #[test]
    fn layer_norm_standardizes_the_last_axis() {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut Initializer::new(&mut store, 0), "n", 4).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(&Tensor::from_f64([2, 4], &[1.0, 2.0, 3.0, 4.0, -3.0, 0.0, 0.0, 3.0]).unwrap());
        let y = ln.forward(&mut tape, &p, x).unwrap();
        for row in tape.data(y).chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
