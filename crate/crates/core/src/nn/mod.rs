//! Differentiable layers: the EAT block and its parts (MSRA, GLI, MD-MSA,
//! FFN, weighted operation mixing).

pub mod attention;
pub mod block;
pub mod ffn;
pub mod gli;
pub mod layers;
pub mod msra;
pub mod params;
pub mod wom;

pub use attention::{Attention, AttentionOutput, DeformField, DeformOptions, MsaConfig};
pub use block::{BlockConfig, EatBlock};
pub use ffn::Ffn;
pub use gli::{gli_param_formula, Gli, GliConfig, GliOutput};
pub use layers::{ChannelNorm, Conv2d, LayerNorm, Linear};
pub use msra::{BranchSpec, Msra, MsraConfig};
pub use params::{Bindings, Initializer, ParamId, ParamStore};
pub use wom::Wom;

/// A layer owning parameters in a [`ParamStore`].
pub trait Module {
    /// Owned parameters in registration order.
    fn param_ids(&self) -> Vec<ParamId>;

    /// Trainable scalar count derived from the configuration alone, without
    /// looking at the stored tensors.
    fn param_count(&self) -> usize;
}
