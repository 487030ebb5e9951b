//! Weighted Operation Mixing: a softmax over trainable logits turns parallel
//! branch outputs into a convex combination.

use super::params::{Bindings, Initializer, ParamId};
use super::Module;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Debug)]
pub struct Wom {
    pub alphas: ParamId,
    pub branches: usize,
}

impl Wom {
    /// Logits start at zero, i.e. uniform mixing.
    pub fn new<T: Real>(init: &mut Initializer<T>, name: &str, branches: usize) -> Result<Self> {
        if branches == 0 {
            return Err(Error::invalid("weighted mixing needs at least one branch"));
        }
        Ok(Wom {
            alphas: init.zeros(&format!("{name}.alphas"), &[branches])?,
            branches,
        })
    }

    /// `softmax(alphas)` as a `[N]` node.
    pub fn coefficients<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings) -> Result<Var> {
        tape.softmax(p[self.alphas], 0)
    }

    /// `Σ_n softmax(α)_n · branch_n`; all branches must share one shape.
    pub fn mix<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, branches: &[Var]) -> Result<Var> {
        if branches.len() != self.branches {
            return Err(Error::invalid(format!(
                "mixing expects {} branches, got {}",
                self.branches,
                branches.len()
            )));
        }
        let coeffs = self.coefficients(tape, p)?;
        let rank = tape.shape(branches[0]).len();
        let mut acc: Option<Var> = None;
        for (n, &b) in branches.iter().enumerate() {
            let c = tape.narrow(coeffs, 0, n, 1)?;
            let c = tape.reshape(c, &vec![1; rank.max(1)])?;
            let scaled = tape.mul(b, c)?;
            acc = Some(match acc {
                None => scaled,
                Some(a) => tape.add(a, scaled)?,
            });
        }
        Ok(acc.expect("at least one branch"))
    }
}

impl Module for Wom {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.alphas]
    }

    fn param_count(&self) -> usize {
        self.branches
    }
}
