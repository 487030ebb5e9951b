use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{DType, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub precision: DType,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.008,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 30,
            batch_size: 50,
            precision: DType::F32,
        }
    }
}

impl OptimConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        // lr = 0 is allowed: it turns training into a no-op, which the
        // determinism checks rely on.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name} {b} must lie in [0,1)"));
            }
        }
        if !(self.eps > 0.0) {
            errs.push(format!("eps {} must be positive", self.eps));
        }
        if self.epochs == 0 {
            errs.push("epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".to_string());
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

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked first: a non-finite
/// value aborts the step before any parameter or moment is touched.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: &OptimConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, t), g) in params.iter().zip(grads) {
        if g.len() != t.numel() {
            return Err(Error::invalid(format!(
                "gradient of {name} has {} values, expected {}",
                g.len(),
                t.numel()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient in {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.eps);
    let c1 = T::one() - T::of(cfg.beta1.powi(t));
    let c2 = T::one() - T::of(cfg.beta2.powi(t));
    for (((_, p), g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64([1], &[w]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = store(0.3);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &[vec![0.0]], &mut st, &OptimConfig::default()).unwrap();
        }
        assert_eq!(p.get(p.find("w").unwrap()).data(), &[0.3]);
    }

    #[test]
    fn constant_gradient_moves_monotonically_against_it() {
        let mut p = store(0.0);
        let mut st = AdamState::new(&p);
        let mut prev = 0.0;
        for _ in 0..50 {
            adam_step(&mut p, &[vec![-2.5]], &mut st, &OptimConfig::default()).unwrap();
            let w = p.get(p.find("w").unwrap()).data()[0];
            assert!(w > prev);
            prev = w;
        }
    }

    #[test]
    fn one_step_on_a_square_descends() {
        let mut p = store(1.0);
        let mut st = AdamState::new(&p);
        // f(w) = w², f'(1) = 2; the first bias-corrected step has size lr.
        adam_step(&mut p, &[vec![2.0]], &mut st, &OptimConfig::default()).unwrap();
        let w = p.get(p.find("w").unwrap()).data()[0];
        assert!(w < 1.0);
        assert!((w - (1.0 - 0.008 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor_and_leaves_state() {
        let mut p = store(1.0);
        let mut st = AdamState::new(&p);
        match adam_step(&mut p, &[vec![f64::NAN]], &mut st, &OptimConfig::default()) {
            Err(Error::NumericFailure(msg)) => assert!(msg.contains('w')),
            other => panic!("{other:?}"),
        }
        assert_eq!(st.step, 0);
        assert_eq!(p.get(p.find("w").unwrap()).data(), &[1.0]);
    }

    #[test]
    fn config_violations_are_listed() {
        let cfg = OptimConfig {
            learning_rate: -1.0,
            beta1: 1.0,
            batch_size: 0,
            ..OptimConfig::default()
        };
        assert_eq!(cfg.violations().len(), 3);
    }
}
