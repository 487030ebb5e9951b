//! Global and Local Interaction.
//!
//! Channels are split into a local part (first `C_l`) processed by a depth-wise
//! convolution on the spatial grid, and a global part (last `C_g = round(p·C)`)
//! processed by attention. Each path is scaled by its mixing weight, the two
//! are concatenated back to `C` channels and fused by a point-wise linear map.

use serde::{Deserialize, Serialize};

use super::attention::{Attention, AttentionOutput, DeformOptions, MsaConfig};
use super::layers::{Conv2d, Linear};
use super::params::{Bindings, Initializer, ParamId};
use super::wom::Wom;
use super::Module;
use crate::error::{Error, Result};
use crate::tensor::{Conv2dParams, Real, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GliConfig {
    pub channels: usize,
    pub split_ratio: f64,
    pub local_kernel: usize,
    pub heads: usize,
    pub use_mdmsa: bool,
}

impl GliConfig {
    pub fn global_channels(&self) -> usize {
        ((self.split_ratio * self.channels as f64).round() as usize).min(self.channels)
    }

    pub fn local_channels(&self) -> usize {
        self.channels - self.global_channels()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.channels == 0 {
            errs.push("GLI channels must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.split_ratio) {
            errs.push(format!("GLI split ratio {} outside [0,1]", self.split_ratio));
            return errs;
        }
        if self.local_kernel == 0 || self.local_kernel.is_multiple_of(2) {
            errs.push(format!("GLI local kernel {} must be odd", self.local_kernel));
        }
        let cg = self.global_channels();
        if cg > 0 && (self.heads == 0 || !cg.is_multiple_of(self.heads)) {
            errs.push(format!(
                "GLI global channels {cg} (C={}, p={}) not divisible by heads {}",
                self.channels, self.split_ratio, self.heads
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
}

/// Closed-form GLI parameter count
/// `5·C_g² + (2 − 2C − k²)·C_g + (k² + 2 + C)·C`, with a single kernel size `k`.
pub fn gli_param_formula(channels: i64, global_channels: i64, kernel: i64) -> i64 {
    let (c, cg, k2) = (channels, global_channels, kernel * kernel);
    5 * cg * cg + (2 - 2 * c - k2) * cg + (k2 + 2 + c) * c
}

#[derive(Clone, Debug)]
pub struct Gli {
    pub cfg: GliConfig,
    pub local: Option<Conv2d>,
    pub global: Option<Attention>,
    /// One logit per present path: local first, then global.
    pub wom: Wom,
    pub fusion: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct GliOutput {
    pub out: Var,
    pub attention: Option<AttentionOutput>,
}

impl Gli {
    pub fn new<T: Real>(init: &mut Initializer<T>, name: &str, cfg: GliConfig) -> Result<Self> {
        cfg.validate()?;
        let (cl, cg) = (cfg.local_channels(), cfg.global_channels());
        let local = if cl > 0 {
            Some(Conv2d::new(
                init,
                &format!("{name}.local"),
                cl,
                cl,
                cfg.local_kernel,
                Conv2dParams::new(1, (cfg.local_kernel - 1) / 2, 1, cl),
            )?)
        } else {
            None
        };
        let global = if cg > 0 {
            Some(Attention::new(
                init,
                &format!("{name}.global"),
                MsaConfig::new(cg, cfg.heads)?,
                cfg.use_mdmsa,
            )?)
        } else {
            None
        };
        let paths = usize::from(local.is_some()) + usize::from(global.is_some());
        let wom = Wom::new(init, &format!("{name}.wom"), paths)?;
        let fusion = Linear::new(init, &format!("{name}.fusion"), cfg.channels, cfg.channels)?;
        Ok(Gli {
            cfg,
            local,
            global,
            wom,
            fusion,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        x: Var,
        grid: (usize, usize),
    ) -> Result<GliOutput> {
        let opts = DeformOptions {
            enabled: self.cfg.use_mdmsa,
            modulation_override: None,
        };
        self.forward_with(tape, p, x, grid, opts)
    }

    /// `x[B,L,C]` on an `h x w` grid → `[B,L,C]`.
    pub fn forward_with<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        x: Var,
        (h, w): (usize, usize),
        opts: DeformOptions,
    ) -> Result<GliOutput> {
        let (b, l) = match *tape.shape(x) {
            [b, l, c] if c == self.cfg.channels && l == h * w => (b, l),
            ref s => {
                return Err(Error::invalid(format!(
                    "GLI expects [B,{},{}] for a {h}x{w} grid, got {s:?}",
                    h * w,
                    self.cfg.channels
                )))
            }
        };
        let (cl, cg) = (self.cfg.local_channels(), self.cfg.global_channels());
        let mut paths = Vec::with_capacity(2);
        let mut attention = None;
        if let Some(conv) = &self.local {
            let xl = tape.narrow(x, 2, 0, cl)?;
            let xl = tape.permute(xl, &[0, 2, 1])?;
            let xl = tape.reshape(xl, &[b, cl, h, w])?;
            let yl = conv.forward(tape, p, xl)?;
            let yl = tape.reshape(yl, &[b, cl, l])?;
            paths.push(tape.permute(yl, &[0, 2, 1])?);
        }
        if let Some(attn) = &self.global {
            let xg = tape.narrow(x, 2, cl, cg)?;
            let out = if attn.is_deformable() {
                attn.mdmsa_forward(tape, p, xg, (h, w), opts)?
            } else {
                attn.msa_forward(tape, p, xg)?
            };
            paths.push(out.out);
            attention = Some(out);
        }
        let coeffs = self.wom.coefficients(tape, p)?;
        let mut scaled = Vec::with_capacity(paths.len());
        for (i, &path) in paths.iter().enumerate() {
            let c = tape.narrow(coeffs, 0, i, 1)?;
            let c = tape.reshape(c, &[1, 1, 1])?;
            scaled.push(tape.mul(path, c)?);
        }
        let joined = if scaled.len() == 1 {
            scaled[0]
        } else {
            tape.concat(&scaled, 2)?
        };
        let out = self.fusion.forward(tape, p, joined)?;
        Ok(GliOutput { out, attention })
    }
}

impl Module for Gli {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(c) = &self.local {
            ids.extend(c.param_ids());
        }
        if let Some(a) = &self.global {
            ids.extend(a.param_ids());
        }
        ids.extend(self.wom.param_ids());
        ids.extend(self.fusion.param_ids());
        ids
    }

    fn param_count(&self) -> usize {
        self.local.as_ref().map_or(0, Conv2d::param_count)
            + self.global.as_ref().map_or(0, Attention::param_count)
            + self.wom.param_count()
            + self.fusion.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        assert_eq!(gli_param_formula(64, 32, 3), 5600);
        assert_eq!(gli_param_formula(20, 0, 3), (9 + 2 + 20) * 20);
        // 5·64 + (2 − 16 − 1)·8 + (1 + 2 + 8)·8 = 320 − 120 + 88
        assert_eq!(gli_param_formula(8, 8, 1), 288);
    }

    #[test]
    fn split_rounding() {
        let cfg = |c, p| GliConfig {
            channels: c,
            split_ratio: p,
            local_kernel: 3,
            heads: 1,
            use_mdmsa: false,
        };
        assert_eq!(cfg(16, 0.5).global_channels(), 8);
        assert_eq!(cfg(10, 0.25).global_channels(), 3);
        assert_eq!(cfg(10, 0.25).local_channels(), 7);
        assert_eq!(cfg(7, 1.0).local_channels(), 0);
        assert!(cfg(8, 1.5).validate().is_err());
        let bad = GliConfig {
            heads: 3,
            ..cfg(16, 0.5)
        };
        assert!(bad.validate().is_err());
    }

    fn run(p: f64) -> (Gli, Vec<usize>) {
        let cfg = GliConfig {
            channels: 8,
            split_ratio: p,
            local_kernel: 3,
            heads: 2,
            use_mdmsa: true,
        };
        let mut store = crate::nn::ParamStore::<f64>::new();
        let gli = Gli::new(&mut Initializer::new(&mut store, 5), "g", cfg).unwrap();
        assert_eq!(gli.param_count(), store.numel());
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(&crate::tensor::Tensor::from_fn([2, 12, 8], |i| ((i * 7) % 11) as f64 / 11.0).unwrap());
        let y = gli.forward(&mut tape, &b, x, (3, 4)).unwrap();
        (gli, tape.shape(y.out).to_vec())
    }

    #[test]
    fn degenerate_splits_drop_a_path() {
        let (all_local, shape) = run(0.0);
        assert!(all_local.global.is_none() && all_local.local.is_some());
        assert_eq!(shape, [2, 12, 8]);
        let (all_global, shape) = run(1.0);
        assert!(all_global.local.is_none() && all_global.global.is_some());
        assert_eq!(shape, [2, 12, 8]);
        let (both, _) = run(0.5);
        assert_eq!(both.wom.branches, 2);
    }
}
