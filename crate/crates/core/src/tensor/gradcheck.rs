//! Central-difference gradient oracle.
//!
//! Compares tape gradients against `(f(x+h) - f(x-h)) / 2h` for every
//! coordinate of every input. Relative error is `|a - n| / max(|a|, |n|, floor)`;
//! the floor keeps vanishing components from turning round-off into
//! unbounded ratios.

use std::fmt;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative-error metric.
pub const DEFAULT_REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    /// Set when a non-finite value was met instead of a comparable pair.
    pub failure: Option<String>,
}

impl GradCheckEntry {
    pub fn passed(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_err < tol
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub h: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed(self.tol))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| {
                if e.failure.is_some() {
                    f64::INFINITY
                } else {
                    e.max_rel_err
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed(self.tol))
    }

    pub fn coordinates(&self) -> usize {
        self.entries.iter().map(|e| e.numel).sum()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let status = if e.passed(self.tol) { "ok  " } else { "FAIL" };
            match &e.failure {
                Some(msg) => writeln!(f, "{status} {:<40} {msg}", e.name)?,
                None => writeln!(
                    f,
                    "{status} {:<40} n={:<6} max_rel={:.3e} max_abs={:.3e}",
                    e.name, e.numel, e.max_rel_err, e.max_abs_err
                )?,
            }
        }
        write!(
            f,
            "max rel err {:.3e} over {} coordinates (h={:e}, tol={:e})",
            self.max_rel_err(),
            self.coordinates(),
            self.h,
            self.tol
        )
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = f(&mut tape, &vars)?;
    let data = tape.data(out);
    if data.len() != 1 {
        return Err(Error::invalid(format!(
            "grad_check function must be scalar-valued, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok(data[0])
}

/// Runs the oracle with [`DEFAULT_REL_FLOOR`].
pub fn grad_check<F>(f: F, inputs: &[(String, Tensor<f64>)], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, h, tol, DEFAULT_REL_FLOOR, None)
}

/// Full-control variant. `fault` is installed on the analytic tape only.
pub fn grad_check_with<F>(
    f: F,
    inputs: &[(String, Tensor<f64>)],
    h: f64,
    tol: f64,
    floor: f64,
    fault: Option<super::Fault>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("grad_check step h must be positive"));
    }
    let mut tape = Tape::new();
    tape.set_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut entries = Vec::with_capacity(inputs.len());
    for (slot, ((name, tensor), &var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.tensor(var);
        let mut entry = GradCheckEntry {
            name: name.clone(),
            numel: tensor.numel(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
            failure: None,
        };
        if !analytic.is_finite() {
            entry.failure = Some("numeric failure: non-finite analytic gradient".into());
            entries.push(entry);
            continue;
        }
        for i in 0..tensor.numel() {
            let x0 = tensor.data()[i];
            work[slot].data_mut()[i] = x0 + h;
            let plus = eval(&f, &work);
            work[slot].data_mut()[i] = x0 - h;
            let minus = eval(&f, &work);
            work[slot].data_mut()[i] = x0;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(Error::NumericFailure(msg)), _) | (_, Err(Error::NumericFailure(msg))) => {
                    entry.failure = Some(format!("numeric failure at {i}: {msg}"));
                    break;
                }
                (Err(e), _) | (_, Err(e)) => return Err(e),
            };
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                entry.failure = Some(format!("numeric failure: non-finite difference at {i}"));
                break;
            }
            let a = analytic.data()[i].as_f64();
            let err = rel_err(a, numeric, floor);
            entry.max_abs_err = entry.max_abs_err.max((a - numeric).abs());
            if err > entry.max_rel_err {
                entry.max_rel_err = err;
                entry.worst_index = i;
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { entries, h, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Fault, OpKind};

    fn input(name: &str, shape: &[usize], seed: f64) -> (String, Tensor<f64>) {
        let t = Tensor::from_fn(shape.to_vec(), |i| ((i as f64 + seed) * 0.731).sin()).unwrap();
        (name.to_string(), t)
    }

    #[test]
    fn sum_of_squares_is_near_exact() {
        let report = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
            &[input("x", &[3, 4], 0.0)],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let f = |tape: &mut Tape<f64>, v: &[Var]| {
            let y = tape.gelu(v[0]);
            Ok(tape.sum(y))
        };
        let inputs = [input("x", &[5], 1.0)];
        let fault = Fault {
            kind: OpKind::Gelu,
            factor: 1.5,
        };
        let report = grad_check_with(f, &inputs, 1e-5, 1e-6, DEFAULT_REL_FLOOR, Some(fault)).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err() > 1e-6);
    }

    #[test]
    fn non_finite_is_reported_not_raised() {
        // log-sum-exp of huge logits stays finite, but a product overflowing to inf does not.
        let report = grad_check(
            |tape, v| {
                let big = tape.mul_const(v[0], 1e300);
                let sq = tape.mul(big, big)?;
                Ok(tape.sum(sq))
            },
            &[input("x", &[2], 0.5)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.entries[0].failure.is_some());
    }
}
