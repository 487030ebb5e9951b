//! Multi-Scale Region Aggregation.
//!
//! `N` convolutions with their own kernel/dilation read the same normalized
//! input; their outputs are mixed by [`Wom`], fused by one more convolution and
//! added to a residual. With stride > 1 (or a channel change) the residual is a
//! strided 1x1 projection, which lets the same module serve as stem and as the
//! downsampler between stages.

use serde::{Deserialize, Serialize};

use super::layers::{ChannelNorm, Conv2d};
use super::params::{Bindings, Initializer, ParamId};
use super::wom::Wom;
use super::Module;
use crate::error::{Error, Result};
use crate::tensor::{Conv2dParams, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl BranchSpec {
    pub const fn new(kernel: usize, stride: usize, dilation: usize) -> Self {
        BranchSpec {
            kernel,
            stride,
            dilation,
        }
    }

    /// "Same"-style padding for odd kernels.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn conv_params(&self, groups: usize) -> Conv2dParams {
        Conv2dParams::new(self.stride, self.padding(), self.dilation, groups)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsraConfig {
    pub channels: usize,
    pub out_channels: usize,
    pub branches: Vec<BranchSpec>,
    pub fusion_kernel: usize,
    /// Branch convolutions are depth-wise (requires `channels == out_channels`).
    pub depthwise: bool,
}

impl MsraConfig {
    /// Every violated constraint, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.channels == 0 || self.out_channels == 0 {
            errs.push("MSRA channel counts must be positive".to_string());
        }
        if self.branches.is_empty() {
            errs.push("MSRA needs at least one branch".to_string());
        }
        for (i, b) in self.branches.iter().enumerate() {
            if b.kernel == 0 || b.kernel % 2 == 0 {
                errs.push(format!("MSRA branch {i}: kernel {} must be odd", b.kernel));
            }
            if b.stride == 0 || b.dilation == 0 {
                errs.push(format!("MSRA branch {i}: stride and dilation must be >= 1"));
            }
        }
        if let Some(first) = self.branches.first() {
            if self.branches.iter().any(|b| b.stride != first.stride) {
                errs.push("MSRA branches must share one stride so their output extents agree".to_string());
            }
        }
        if self.fusion_kernel == 0 || self.fusion_kernel.is_multiple_of(2) {
            errs.push(format!("MSRA fusion kernel {} must be odd", self.fusion_kernel));
        }
        if self.depthwise && self.channels != self.out_channels {
            errs.push(format!(
                "depth-wise MSRA branches need equal channels, got {} -> {}",
                self.channels, self.out_channels
            ));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations() {
            v if v.is_empty() => Ok(()),
            v => Err(Error::InvalidConfig(v)),
        }
    }

    pub fn stride(&self) -> usize {
        self.branches.first().map_or(1, |b| b.stride)
    }

    pub fn output_extent(&self, n: usize) -> usize {
        (n - 1) / self.stride() + 1
    }

    fn needs_projection(&self) -> bool {
        self.stride() > 1 || self.channels != self.out_channels
    }
}

#[derive(Clone, Debug)]
pub struct Msra {
    pub cfg: MsraConfig,
    pub norm: ChannelNorm,
    pub branches: Vec<Conv2d>,
    pub wom: Wom,
    pub fusion: Conv2d,
    pub shortcut: Option<Conv2d>,
}

impl Msra {
    pub fn new<T: Real>(init: &mut Initializer<T>, name: &str, cfg: MsraConfig) -> Result<Self> {
        cfg.validate()?;
        let groups = if cfg.depthwise { cfg.channels } else { 1 };
        let norm = ChannelNorm::new(init, &format!("{name}.norm"), cfg.channels)?;
        let branches = cfg
            .branches
            .iter()
            .enumerate()
            .map(|(i, b)| {
                Conv2d::new(
                    init,
                    &format!("{name}.branch{i}"),
                    cfg.channels,
                    cfg.out_channels,
                    b.kernel,
                    b.conv_params(groups),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let wom = Wom::new(init, &format!("{name}.wom"), cfg.branches.len())?;
        let fusion = Conv2d::new(
            init,
            &format!("{name}.fusion"),
            cfg.out_channels,
            cfg.out_channels,
            cfg.fusion_kernel,
            Conv2dParams::new(1, (cfg.fusion_kernel - 1) / 2, 1, 1),
        )?;
        let shortcut = if cfg.needs_projection() {
            Some(Conv2d::new(
                init,
                &format!("{name}.shortcut"),
                cfg.channels,
                cfg.out_channels,
                1,
                Conv2dParams::new(cfg.stride(), 0, 1, 1),
            )?)
        } else {
            None
        };
        Ok(Msra {
            cfg,
            norm,
            branches,
            wom,
            fusion,
            shortcut,
        })
    }

    /// `x[B,C,H,W]` → `[B,C',H',W']`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let mixed = self.mixed(tape, p, x)?;
        let fused = self.fusion.forward(tape, p, mixed)?;
        let residual = match &self.shortcut {
            Some(proj) => proj.forward(tape, p, x)?,
            None => x,
        };
        tape.add(fused, residual)
    }

    /// The weighted branch mixture before fusion.
    pub fn mixed<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let normed = self.norm.forward(tape, p, x)?;
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(tape, p, normed))
            .collect::<Result<Vec<_>>>()?;
        let first = tape.shape(outs[0]).to_vec();
        if outs.iter().any(|&o| tape.shape(o) != first.as_slice()) {
            return Err(Error::invalid("MSRA branch outputs disagree in shape"));
        }
        self.wom.mix(tape, p, &outs)
    }
}

impl Module for Msra {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.norm.param_ids();
        ids.extend(self.branches.iter().flat_map(Conv2d::param_ids));
        ids.extend(self.wom.param_ids());
        ids.extend(self.fusion.param_ids());
        if let Some(s) = &self.shortcut {
            ids.extend(s.param_ids());
        }
        ids
    }

    fn param_count(&self) -> usize {
        self.norm.param_count()
            + self.branches.iter().map(Conv2d::param_count).sum::<usize>()
            + self.wom.param_count()
            + self.fusion.param_count()
            + self.shortcut.as_ref().map_or(0, Conv2d::param_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;

    fn config(cin: usize, cout: usize, stride: usize) -> MsraConfig {
        MsraConfig {
            channels: cin,
            out_channels: cout,
            branches: vec![BranchSpec::new(3, stride, 1), BranchSpec::new(3, stride, 2)],
            fusion_kernel: 1,
            depthwise: false,
        }
    }

    #[test]
    fn stride_two_halves_the_map() {
        let mut store = ParamStore::<f64>::new();
        let msra = Msra::new(&mut Initializer::new(&mut store, 1), "m", config(3, 8, 2)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(&Tensor::from_fn([1, 3, 32, 32], |i| (i % 7) as f64 / 7.0).unwrap());
        let y = msra.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 8, 16, 16]);
        assert_eq!(msra.cfg.output_extent(31), 16);
        assert_eq!(msra.param_count(), store.numel());
    }

    #[test]
    fn identity_shortcut_without_projection() {
        let mut store = ParamStore::<f32>::new();
        let msra = Msra::new(&mut Initializer::new(&mut store, 1), "m", config(4, 4, 1)).unwrap();
        assert!(msra.shortcut.is_none());
        let msra = Msra::new(&mut Initializer::new(&mut store, 1), "n", config(4, 6, 1)).unwrap();
        assert!(msra.shortcut.is_some());
    }

    #[test]
    fn invalid_configs_list_every_problem() {
        let mut cfg = config(4, 6, 1);
        cfg.branches.push(BranchSpec::new(2, 2, 1));
        cfg.fusion_kernel = 0;
        cfg.depthwise = true;
        assert_eq!(cfg.violations().len(), 4, "{:?}", cfg.violations());
    }
}
