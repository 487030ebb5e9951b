//! Multi-head self-attention and its modulated deformable variant.
//!
//! In the deformable variant the queries come from the input map `X`, while
//! keys and values come from `X̂`, a copy of `X` resampled at query-predicted
//! offsets and scaled by a sigmoid modulation:
//!
//! ```text
//! Q = f_q(X)
//! Δl, Δm = f_md(Q)                 Δl ∈ R², Δm ∈ (0,1), per position
//! X̂_l = bilinear(X, p_l + Δl_l) · Δm_l
//! K, V = f_k(X̂), f_v(X̂)
//! ```

use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::params::{Bindings, Initializer, ParamId};
use super::Module;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsaConfig {
    pub embed_dim: usize,
    pub heads: usize,
}

impl MsaConfig {
    pub fn new(embed_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || embed_dim == 0 || !embed_dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "embed dim {embed_dim} must be a positive multiple of heads {heads}"
            )));
        }
        Ok(MsaConfig { embed_dim, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Run-time switches of the deformable path.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeformOptions {
    pub enabled: bool,
    /// Replaces the predicted `Δm` with a constant (identity checks).
    pub modulation_override: Option<f64>,
}

impl DeformOptions {
    pub fn enabled() -> Self {
        DeformOptions {
            enabled: true,
            modulation_override: None,
        }
    }
}

/// Offsets `[B,L,2]` (row, col; pixel units, unbounded) and modulation `[B,L,1]`.
#[derive(Clone, Copy, Debug)]
pub struct DeformField {
    pub offsets: Var,
    pub modulation: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[B,L,D]`
    pub out: Var,
    /// Row-stochastic attention weights `[B,h,L,L]`.
    pub probs: Var,
    pub deform: Option<DeformField>,
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub cfg: MsaConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    /// `f_md`: Q features → (Δrow, Δcol, modulation logit). Present only when
    /// the layer was built deformable.
    pub offset_head: Option<Linear>,
}

impl Attention {
    pub fn new<T: Real>(init: &mut Initializer<T>, name: &str, cfg: MsaConfig, deformable: bool) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Attention {
            cfg,
            q: Linear::new(init, &format!("{name}.q"), d, d)?,
            k: Linear::new(init, &format!("{name}.k"), d, d)?,
            v: Linear::new(init, &format!("{name}.v"), d, d)?,
            proj: Linear::new(init, &format!("{name}.proj"), d, d)?,
            offset_head: if deformable {
                Some(Linear::zeroed(init, &format!("{name}.offset"), d, 3)?)
            } else {
                None
            },
        })
    }

    pub fn is_deformable(&self) -> bool {
        self.offset_head.is_some()
    }

    fn check_input<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<(usize, usize)> {
        match *tape.shape(x) {
            [b, l, d] if d == self.cfg.embed_dim => Ok((b, l)),
            ref s => Err(Error::invalid(format!(
                "attention expects [B,L,{}], got {s:?}",
                self.cfg.embed_dim
            ))),
        }
    }

    fn split_heads<T: Real>(&self, tape: &mut Tape<T>, x: Var, b: usize, l: usize) -> Result<Var> {
        let x = tape.reshape(x, &[b, l, self.cfg.heads, self.cfg.head_dim()])?;
        tape.permute(x, &[0, 2, 1, 3])
    }

    fn attend<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        q: Var,
        k: Var,
        v: Var,
        b: usize,
        l: usize,
    ) -> Result<(Var, Var)> {
        let q = self.split_heads(tape, q, b, l)?;
        let k = self.split_heads(tape, k, b, l)?;
        let v = self.split_heads(tape, v, b, l)?;
        let scores = tape.matmul(q, k, true)?;
        let scale = T::one() / T::of(self.cfg.head_dim() as f64).sqrt();
        let scores = tape.mul_const(scores, scale);
        let probs = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(probs, v, false)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, l, self.cfg.embed_dim])?;
        Ok((self.proj.forward(tape, p, ctx)?, probs))
    }

    /// Standard multi-head scaled dot-product attention over `x[B,L,D]`.
    pub fn msa_forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<AttentionOutput> {
        let (b, l) = self.check_input(tape, x)?;
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, x)?;
        let v = self.v.forward(tape, p, x)?;
        let (out, probs) = self.attend(tape, p, q, k, v, b, l)?;
        Ok(AttentionOutput {
            out,
            probs,
            deform: None,
        })
    }

    /// Modulated deformable attention over `x[B,L,D]` laid out on an `h x w` grid.
    /// With `opts.enabled == false` this is exactly [`Self::msa_forward`].
    pub fn mdmsa_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        x: Var,
        (h, w): (usize, usize),
        opts: DeformOptions,
    ) -> Result<AttentionOutput> {
        if !opts.enabled {
            return self.msa_forward(tape, p, x);
        }
        let head = self
            .offset_head
            .as_ref()
            .ok_or_else(|| Error::invalid("deformable attention requested on a layer built without an offset head"))?;
        let (b, l) = self.check_input(tape, x)?;
        if l != h * w {
            return Err(Error::invalid(format!("{l} tokens do not tile a {h}x{w} grid")));
        }
        let d = self.cfg.embed_dim;
        let q = self.q.forward(tape, p, x)?;
        let md = head.forward(tape, p, q)?;
        let offsets = tape.narrow(md, 2, 0, 2)?;
        if tape.data(offsets).iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("deformable offsets are non-finite"));
        }
        let modulation = match opts.modulation_override {
            Some(m) => tape.constant(&Tensor::full([b, l, 1], T::of(m))?),
            None => {
                let logit = tape.narrow(md, 2, 2, 1)?;
                tape.sigmoid(logit)
            }
        };
        let grid = Tensor::from_fn([b, l, 2], |i| {
            let pos = (i / 2) % l;
            T::of(if i % 2 == 0 { pos / w } else { pos % w } as f64)
        })?;
        let grid = tape.constant(&grid);
        let coords = tape.add(offsets, grid)?;

        let map = tape.permute(x, &[0, 2, 1])?;
        let map = tape.reshape(map, &[b, d, h, w])?;
        let sampled = tape.bilinear_sample(map, coords)?;
        let sampled = tape.permute(sampled, &[0, 2, 1])?;
        let x_hat = tape.mul(sampled, modulation)?;

        let k = self.k.forward(tape, p, x_hat)?;
        let v = self.v.forward(tape, p, x_hat)?;
        let (out, probs) = self.attend(tape, p, q, k, v, b, l)?;
        Ok(AttentionOutput {
            out,
            probs,
            deform: Some(DeformField { offsets, modulation }),
        })
    }
}

impl Module for Attention {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = [&self.q, &self.k, &self.v, &self.proj]
            .into_iter()
            .flat_map(Linear::param_ids)
            .collect();
        if let Some(h) = &self.offset_head {
            ids.extend(h.param_ids());
        }
        ids
    }

    fn param_count(&self) -> usize {
        let d = self.cfg.embed_dim;
        4 * (d * d + d) + if self.is_deformable() { 3 * d + 3 } else { 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn layer(deformable: bool) -> (ParamStore<f64>, Attention) {
        let mut store = ParamStore::new();
        let att = Attention::new(
            &mut Initializer::new(&mut store, 9),
            "a",
            MsaConfig::new(8, 2).unwrap(),
            deformable,
        )
        .unwrap();
        (store, att)
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, att) = layer(false);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(&Tensor::from_fn([1, 1, 8], |i| i as f64 - 3.5).unwrap());
        let out = att.msa_forward(&mut tape, &p, x).unwrap();
        let v = att.v.forward(&mut tape, &p, x).unwrap();
        let direct = att.proj.forward(&mut tape, &p, v).unwrap();
        assert!(tape.data(out.probs).iter().all(|&w| w == 1.0));
        for (a, b) in tape.data(out.out).iter().zip(tape.data(direct)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn head_split_is_validated() {
        assert!(MsaConfig::new(8, 3).is_err());
        assert!(MsaConfig::new(0, 1).is_err());
        assert_eq!(MsaConfig::new(12, 4).unwrap().head_dim(), 3);
    }

    #[test]
    fn deformable_path_reports_its_field() {
        let (store, att) = layer(true);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(&Tensor::from_fn([2, 6, 8], |i| (i % 5) as f64 / 5.0).unwrap());
        let out = att
            .mdmsa_forward(&mut tape, &p, x, (2, 3), DeformOptions::enabled())
            .unwrap();
        let field = out.deform.expect("deformable output");
        assert_eq!(tape.shape(field.offsets), &[2, 6, 2]);
        // Zero-initialized offset head: sigmoid(0) modulation everywhere.
        assert!(tape.data(field.modulation).iter().all(|&m| m == 0.5));
        assert!(att
            .mdmsa_forward(&mut tape, &p, x, (4, 2), DeformOptions::enabled())
            .is_err());

        let (store, plain) = layer(false);
        let p = store.bind(&mut tape);
        assert!(plain
            .mdmsa_forward(&mut tape, &p, x, (2, 3), DeformOptions::enabled())
            .is_err());
    }
}
