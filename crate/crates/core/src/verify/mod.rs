//! Self-verification suites: finite-difference gradient checks, oracle
//! equivalences and algebraic invariants of the building blocks.
//!
//! Everything here runs in 64-bit on one thread with fixed seeds, so a report
//! is reproducible bit for bit.

mod gradients;
mod invariants;
pub mod oracle;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Fault, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Gradcheck,
    Oracles,
    Identity,
    Wom,
    Params,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Gradcheck,
        Suite::Oracles,
        Suite::Identity,
        Suite::Wom,
        Suite::Params,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Oracles => "oracles",
            Suite::Identity => "identity",
            Suite::Wom => "wom",
            Suite::Params => "params",
        }
    }

    /// Parses a selector; `all` expands to every suite.
    pub fn parse_selector(s: &str) -> Result<Vec<Suite>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.parse().map(|suite| vec![suite])
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::invalid(format!(
                "unknown suite {s:?}; expected one of {} or all",
                names.join(", ")
            ))
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Outcome of one named check: the worst error seen against its tolerance.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl Check {
    /// Passes when `max_err` is finite and `<= tol` (`tol = 0` demands exactness).
    pub fn within(suite: Suite, name: impl Into<String>, max_err: f64, tol: f64) -> Self {
        Check {
            suite,
            name: name.into(),
            max_err,
            tol,
            passed: max_err.is_finite() && max_err <= tol,
            detail: String::new(),
        }
    }

    /// Gradient checks use a strict bound: `max_err < tol`.
    pub fn below(suite: Suite, name: impl Into<String>, max_err: f64, tol: f64) -> Self {
        Check {
            passed: max_err.is_finite() && max_err < tol,
            ..Self::within(suite, name, max_err, tol)
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn suite(&self, suite: Suite) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(move |c| c.suite == suite)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Largest error among the checks of `suite`.
    pub fn max_err(&self, suite: Suite) -> f64 {
        self.suite(suite).map(|c| c.max_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for c in &self.checks {
            let status = if c.passed { "ok  " } else { "FAIL" };
            write!(
                f,
                "{status} {:<9} {:<width$} max_err={:<10.3e} tol={:.0e}",
                c.suite.name(),
                c.name,
                c.max_err,
                c.tol
            )?;
            if !c.detail.is_empty() {
                write!(f, "  {}", c.detail)?;
            }
            writeln!(f)?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Corrupts one backward rule on every analytic tape (negative control).
    pub fault: Option<Fault>,
}

pub fn run(suites: &[Suite], opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    for &suite in suites {
        let checks = match suite {
            Suite::Gradcheck => gradients::suite(opts)?,
            Suite::Oracles => invariants::oracles(opts)?,
            Suite::Identity => invariants::identity(opts)?,
            Suite::Wom => invariants::wom(opts)?,
            Suite::Params => invariants::params()?,
        };
        report.checks.extend(checks);
    }
    Ok(report)
}

pub(crate) fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
    .expect("non-empty shape")
}

/// Replaces every all-zero tensor (biases, offset heads, mixing logits) with
/// small random values so that no gradient path is trivially zero.
pub(crate) fn randomize_zero_params(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, std: f64) {
    for (_, t) in store.iter_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = z * std;
            }
        }
    }
}

/// Adds `N(0, std²)` noise to every parameter. Default initializations are
/// tiny (0.02) for attention projections, which leaves query/key gradients
/// near the relative-error floor; block-level checks want O(1) sensitivities.
pub(crate) fn perturb_params(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, std: f64) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += z * std;
        }
    }
}

/// `Σ y ⊙ r`: a scalar whose gradient w.r.t. `y` is the fixed tensor `r`.
pub(crate) fn project(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(r);
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_parsing() {
        assert_eq!(Suite::parse_selector("all").unwrap().len(), 5);
        assert_eq!(Suite::parse_selector("wom").unwrap(), vec![Suite::Wom]);
        assert!(Suite::parse_selector("nope").is_err());
    }

    #[test]
    fn exact_checks_reject_any_error() {
        assert!(Check::within(Suite::Params, "x", 0.0, 0.0).passed);
        assert!(!Check::within(Suite::Params, "x", 1e-300, 0.0).passed);
        assert!(!Check::below(Suite::Gradcheck, "x", f64::NAN, 1.0).passed);
    }
}
