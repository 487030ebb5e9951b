//! Four-stage pyramid backbone with an MSRA stem and a pooled linear head.

pub mod checkpoint;
pub mod report;
pub mod spec;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, AnyModel, Checkpoint, TensorEntry,
    CHECKPOINT_MAGIC, FORMAT_VERSION,
};
pub use report::{count_params_flops, ModuleRow, ParamReport};
pub use spec::{ModelSpec, StageSpec};

use crate::error::{Error, Result};
use crate::nn::{Bindings, EatBlock, Initializer, LayerNorm, Linear, Module, Msra, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Layer-norm over channels, mean over tokens, linear to class logits.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub norm: LayerNorm,
    pub fc: Linear,
}

impl TaskHead {
    pub fn new<T: Real>(init: &mut Initializer<T>, name: &str, channels: usize, classes: usize) -> Result<Self> {
        Ok(TaskHead {
            norm: LayerNorm::new(init, &format!("{name}.norm"), channels)?,
            fc: Linear::new(init, &format!("{name}.fc"), channels, classes)?,
        })
    }

    /// `features[B,L,C]` → `logits[B,K]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, features: Var) -> Result<Var> {
        if tape.shape(features).len() != 3 {
            return Err(Error::invalid(format!(
                "head expects [B,L,C] features, got {:?}",
                tape.shape(features)
            )));
        }
        let normed = self.norm.forward(tape, p, features)?;
        let pooled = tape.mean(normed, 1)?;
        self.fc.forward(tape, p, pooled)
    }
}

impl Module for TaskHead {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.norm.param_ids();
        ids.extend(self.fc.param_ids());
        ids
    }

    fn param_count(&self) -> usize {
        self.norm.param_count() + self.fc.param_count()
    }
}

/// Layer structure; parameters live in the owning [`Model`]'s store.
#[derive(Clone, Debug)]
pub struct Network {
    pub stem: Msra,
    pub stages: Vec<Vec<EatBlock>>,
    pub head: TaskHead,
}

impl Network {
    fn new<T: Real>(init: &mut Initializer<T>, spec: &ModelSpec) -> Result<Self> {
        let stem = Msra::new(init, "stem", spec.stem_config())?;
        let stages = spec
            .block_configs()
            .into_iter()
            .enumerate()
            .map(|(i, blocks)| {
                blocks
                    .into_iter()
                    .enumerate()
                    .map(|(j, cfg)| EatBlock::new(init, &format!("stage{}.block{j}", i + 1), cfg))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let last = spec.stages.last().map_or(spec.stem_channels, |s| s.channels);
        let head = TaskHead::new(init, "head", last, spec.num_classes)?;
        Ok(Network { stem, stages, head })
    }

    /// Named modules in forward order: stem, every block part, head.
    pub fn modules(&self) -> Vec<(String, &dyn Module)> {
        let mut out: Vec<(String, &dyn Module)> = vec![("stem".to_string(), &self.stem)];
        for block in self.stages.iter().flatten() {
            out.extend(block.parts());
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn blocks(&self) -> impl Iterator<Item = &EatBlock> {
        self.stages.iter().flatten()
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    spec: ModelSpec,
    seed: u64,
    net: Network,
    params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Validates the spec and initializes every parameter from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let net = {
            let mut init = Initializer::new(&mut params, seed);
            Network::new(&mut init, &spec)?
        };
        Ok(Model {
            spec,
            seed,
            net,
            params,
        })
    }

    /// Rebuilds the structure for `spec` and installs `values` in place of the
    /// seeded initialization. Every parameter must be present with its shape.
    pub fn from_params(spec: ModelSpec, seed: u64, values: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::build(spec, seed)?;
        if values.len() != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                values.len()
            )));
        }
        for (name, tensor) in values {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter tensor {name}")))?;
            model
                .params
                .set(id, tensor)
                .map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Same structure and values at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            seed: self.seed,
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Images `[B,3,H,W]` with `(H,W) == spec.input_resolution` → logits `[B,K]`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bindings, images: Var) -> Result<Var> {
        let (h, w) = self.spec.input_resolution;
        match *tape.shape(images) {
            [_, 3, ih, iw] if (ih, iw) == (h, w) => {}
            ref s => return Err(Error::invalid(format!("model expects images [B,3,{h},{w}], got {s:?}"))),
        }
        if tape.data(images).iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("input images contain non-finite values"));
        }
        let logits = self.forward_unchecked(tape, p, images)?;
        if tape.data(logits).iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("forward pass produced non-finite logits"));
        }
        Ok(logits)
    }

    /// Forward without the resolution/finiteness guards; any size the
    /// pyramid can tile is accepted (used for FLOPs at other resolutions).
    pub(crate) fn forward_unchecked(&self, tape: &mut Tape<T>, p: &Bindings, images: Var) -> Result<Var> {
        tape.set_scope("stem");
        let mut x = self.net.stem.forward(tape, p, images)?;
        for block in self.net.blocks() {
            x = block.forward(tape, p, x)?;
        }
        tape.set_scope("head");
        let [b, c, h, w] = *tape.shape(x) else {
            return Err(Error::invalid("final stage output must be [B,C,H,W]"));
        };
        let tokens = tape.permute(x, &[0, 2, 3, 1])?;
        let tokens = tape.reshape(tokens, &[b, h * w, c])?;
        let logits = self.net.head.forward(tape, p, tokens)?;
        tape.clear_scope();
        Ok(logits)
    }

    /// Inference-only logits for a batch tensor.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(images);
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out))
    }

    /// Arg-max class per row.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok(argmax_rows(logits.data(), self.spec.num_classes))
    }

    /// Mean cross-entropy on a batch and its gradient for every parameter,
    /// aligned with [`ParamStore::ids`].
    pub fn loss_and_grads(&self, images: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<usize>, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(images);
        let logits = self.forward(&mut tape, &p, x)?;
        let preds = argmax_rows(tape.data(logits), self.spec.num_classes);
        let loss = tape.cross_entropy(logits, labels)?;
        let value = tape.data(loss)[0];
        if !value.is_finite() {
            return Err(Error::numeric("loss is non-finite"));
        }
        let mut grads = tape.backward(loss)?;
        let per_param = p
            .vars()
            .iter()
            .zip(self.params.iter())
            .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| vec![T::zero(); t.numel()]))
            .collect();
        Ok((value, preds, per_param))
    }
}

pub(crate) fn argmax_rows<T: Real>(data: &[T], k: usize) -> Vec<usize> {
    data.chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, T::neg_infinity()),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(b: usize, res: usize, seed: f64) -> Tensor<f64> {
        Tensor::from_fn([b, 3, res, res], |i| (((i as f64) + seed) * 0.37).sin() * 0.5 + 0.5).unwrap()
    }

    #[test]
    fn same_seed_same_checksum() {
        let a = Model::<f32>::build(ModelSpec::desk(3), 11).unwrap();
        let b = Model::<f32>::build(ModelSpec::desk(3), 11).unwrap();
        let c = Model::<f32>::build(ModelSpec::desk(3), 12).unwrap();
        assert_eq!(a.params().checksum(), b.params().checksum());
        assert_ne!(a.params().checksum(), c.params().checksum());
    }

    #[test]
    fn one_class_is_rejected() {
        assert!(matches!(
            Model::<f32>::build(ModelSpec::desk(1), 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn forward_shapes_and_batch_independence() {
        let mut spec = ModelSpec::desk(5);
        for s in &mut spec.stages {
            s.depth = 1;
        }
        let model = Model::<f64>::build(spec, 3).unwrap();
        let one = images(1, 32, 0.0);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let two = Tensor::new([2, 3, 32, 32], two).unwrap();
        let logits = model.logits(&two).unwrap();
        assert_eq!(logits.shape(), &[2, 5]);
        assert_eq!(logits.data()[..5], logits.data()[5..]);
    }

    #[test]
    fn wrong_resolution_and_nan_are_rejected() {
        let model = Model::<f64>::build(ModelSpec::micro(3), 0).unwrap();
        assert!(matches!(
            model.logits(&images(1, 32, 0.0)),
            Err(Error::InvalidArgument(_))
        ));
        let mut bad = images(1, 16, 0.0);
        bad.data_mut()[7] = f64::NAN;
        assert!(matches!(model.logits(&bad), Err(Error::NumericFailure(_))));
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let mut model = Model::<f64>::build(ModelSpec::micro(4), 0).unwrap();
        for name in ["head.fc.weight", "head.fc.bias"] {
            let id = model.params().find(name).unwrap();
            let t = model.params_mut().get_mut(id);
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let logits = model.logits(&images(2, 16, 1.0)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_pooling_ignores_token_order() {
        let mut store = ParamStore::<f64>::new();
        let head = TaskHead::new(&mut Initializer::new(&mut store, 5), "head", 4, 3).unwrap();
        let feats: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64).cos()).collect();
        // Reverse token order within each batch row.
        let mut perm = feats.clone();
        for t in 0..6 {
            perm[t * 4..t * 4 + 4].copy_from_slice(&feats[(5 - t) * 4..(5 - t) * 4 + 4]);
        }
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let x = tape.constant(&Tensor::new([1, 6, 4], data).unwrap());
            let y = head.forward(&mut tape, &p, x).unwrap();
            tape.value(y)
        };
        assert!(run(feats).max_abs_diff(&run(perm)).unwrap() < 1e-12);
    }

    #[test]
    fn gradient_reaches_stage_one() {
        let model = Model::<f64>::build(ModelSpec::micro(3), 2).unwrap();
        let (_, _, grads) = model.loss_and_grads(&images(2, 16, 3.0), &[0, 2]).unwrap();
        let norm: f64 = model
            .params()
            .iter()
            .zip(&grads)
            .filter(|((name, _), _)| name.starts_with("stage1."))
            .flat_map(|(_, g)| g.iter().map(|v| v * v))
            .sum();
        assert!(norm > 0.0);
    }

    #[test]
    fn no_position_embeddings() {
        let model = Model::<f32>::build(ModelSpec::desk(3), 0).unwrap();
        assert!(model.params().iter().all(|(n, _)| !n.contains("pos")));
    }
}
