use super::layers::Linear;
use super::params::{Bindings, Initializer, ParamId};
use super::Module;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Position-wise `linear(D→rD) ∘ GELU ∘ linear(rD→D)`. The residual is added
/// by the enclosing block.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn hidden_dim(dim: usize, hidden_ratio: f64) -> usize {
        ((dim as f64 * hidden_ratio).round() as usize).max(1)
    }

    pub fn new<T: Real>(init: &mut Initializer<T>, name: &str, dim: usize, hidden_ratio: f64) -> Result<Self> {
        if !(hidden_ratio > 0.0) {
            return Err(Error::invalid(format!(
                "ffn hidden ratio must be positive, got {hidden_ratio}"
            )));
        }
        let hidden = Self::hidden_dim(dim, hidden_ratio);
        Ok(Ffn {
            fc1: Linear::new(init, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

impl Module for Ffn {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.fc1.param_ids();
        ids.extend(self.fc2.param_ids());
        ids
    }

    fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut store = ParamStore::<f64>::new();
        let ffn = Ffn::new(&mut Initializer::new(&mut store, 3), "ffn", 4, 2.0).unwrap();
        for id in ffn.fc2.param_ids() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape).unwrap()).unwrap();
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(&Tensor::from_fn([2, 3, 4], |i| i as f64 - 10.0).unwrap());
        let y = ffn.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 4]);
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hidden_width_and_count() {
        assert_eq!(Ffn::hidden_dim(10, 2.5), 25);
        let mut store = ParamStore::<f32>::new();
        let ffn = Ffn::new(&mut Initializer::new(&mut store, 0), "f", 8, 4.0).unwrap();
        assert_eq!(ffn.param_count(), 8 * 32 + 32 + 32 * 8 + 8);
        assert_eq!(ffn.param_count(), store.numel());
        assert!(Ffn::new(&mut Initializer::new(&mut store, 0), "g", 8, 0.0).is_err());
    }
}
