use serde::{Deserialize, Serialize};

use super::ffn::Ffn;
use super::gli::{Gli, GliConfig};
use super::layers::LayerNorm;
use super::msra::{Msra, MsraConfig};
use super::params::{Bindings, Initializer, ParamId};
use super::Module;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Hyperparameters of one EAT block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub msra: MsraConfig,
    pub gli: GliConfig,
    pub mlp_ratio: f64,
}

impl BlockConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut errs = self.msra.violations();
        errs.extend(self.gli.violations());
        if self.gli.channels != self.msra.out_channels {
            errs.push(format!(
                "GLI channels {} must equal MSRA output channels {}",
                self.gli.channels, self.msra.out_channels
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            errs.push(format!("mlp ratio {} must be positive", self.mlp_ratio));
        }
        errs
    }
}

/// MSRA, then GLI, then FFN, each as `y = f(x) + x`. GLI and FFN read a
/// layer-normed input; MSRA normalizes internally.
#[derive(Clone, Debug)]
pub struct EatBlock {
    pub name: String,
    pub cfg: BlockConfig,
    pub msra: Msra,
    pub norm_gli: LayerNorm,
    pub gli: Gli,
    pub norm_ffn: LayerNorm,
    pub ffn: Ffn,
}

impl EatBlock {
    pub fn new<T: Real>(init: &mut Initializer<T>, name: &str, cfg: BlockConfig) -> Result<Self> {
        let errs = cfg.violations();
        if !errs.is_empty() {
            return Err(Error::InvalidConfig(errs));
        }
        let c = cfg.msra.out_channels;
        Ok(EatBlock {
            name: name.to_string(),
            msra: Msra::new(init, &format!("{name}.msra"), cfg.msra.clone())?,
            norm_gli: LayerNorm::new(init, &format!("{name}.norm_gli"), c)?,
            gli: Gli::new(init, &format!("{name}.gli"), cfg.gli.clone())?,
            norm_ffn: LayerNorm::new(init, &format!("{name}.norm_ffn"), c)?,
            ffn: Ffn::new(init, &format!("{name}.ffn"), c, cfg.mlp_ratio)?,
            cfg,
        })
    }

    /// `x[B,C,H,W]` → `[B,C',H',W']`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        tape.set_scope(&format!("{}.msra", self.name));
        let y = self.msra.forward(tape, p, x)?;
        let [b, c, h, w] = *tape.shape(y) else {
            return Err(Error::invalid("MSRA output must be [B,C,H,W]"));
        };
        let tokens = tape.permute(y, &[0, 2, 3, 1])?;
        let tokens = tape.reshape(tokens, &[b, h * w, c])?;

        tape.set_scope(&format!("{}.norm_gli", self.name));
        let normed = self.norm_gli.forward(tape, p, tokens)?;
        tape.set_scope(&format!("{}.gli", self.name));
        let g = self.gli.forward(tape, p, normed, (h, w))?;
        let tokens = tape.add(tokens, g.out)?;

        tape.set_scope(&format!("{}.norm_ffn", self.name));
        let normed = self.norm_ffn.forward(tape, p, tokens)?;
        tape.set_scope(&format!("{}.ffn", self.name));
        let f = self.ffn.forward(tape, p, normed)?;
        let tokens = tape.add(tokens, f)?;

        let map = tape.reshape(tokens, &[b, h, w, c])?;
        let out = tape.permute(map, &[0, 3, 1, 2]);
        tape.clear_scope();
        out
    }

    /// Named sub-modules in forward order, for per-module accounting.
    pub fn parts(&self) -> Vec<(String, &dyn Module)> {
        vec![
            (format!("{}.msra", self.name), &self.msra as &dyn Module),
            (format!("{}.norm_gli", self.name), &self.norm_gli),
            (format!("{}.gli", self.name), &self.gli),
            (format!("{}.norm_ffn", self.name), &self.norm_ffn),
            (format!("{}.ffn", self.name), &self.ffn),
        ]
    }
}

impl Module for EatBlock {
    fn param_ids(&self) -> Vec<ParamId> {
        self.parts().iter().flat_map(|(_, m)| m.param_ids()).collect()
    }

    fn param_count(&self) -> usize {
        self.parts().iter().map(|(_, m)| m.param_count()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn downsampling_block_maps_shapes_and_counts() {
        let cfg = ModelSpec::desk(3).block_configs()[1][0].clone();
        let (cin, cout) = (cfg.msra.channels, cfg.msra.out_channels);
        let mut store = ParamStore::<f64>::new();
        let block = EatBlock::new(&mut Initializer::new(&mut store, 2), "b", cfg).unwrap();
        assert_eq!(block.param_count(), store.numel());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(&Tensor::from_fn([2, cin, 8, 8], |i| (i % 13) as f64 / 13.0).unwrap());
        let y = block.forward(&mut tape, &p, x).unwrap();
        let stride = block.cfg.msra.stride();
        assert_eq!(tape.shape(y), &[2, cout, 8 / stride, 8 / stride]);
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut cfg = ModelSpec::desk(3).block_configs()[0][0].clone();
        cfg.gli.channels += 2;
        cfg.mlp_ratio = 0.0;
        assert_eq!(cfg.violations().len(), 2);
    }
}
