use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::nn::gli_param_formula;
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleRow {
    pub name: String,
    /// Count derived from the module configuration.
    pub params: usize,
    /// Sum of extents of the tensors the module owns.
    pub enumerated: usize,
    pub flops: u64,
    /// GLI rows only: closed-form count and `params - formula`.
    pub gli_formula: Option<i64>,
    pub gli_delta: Option<i64>,
    /// GLI rows only: parameters of the attention (global) path.
    pub global_params: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub resolution: (usize, usize),
    pub rows: Vec<ModuleRow>,
    pub total_params: usize,
    /// Walk of the whole parameter store, independent of the rows.
    pub enumerated_params: usize,
    pub total_flops: u64,
}

impl ParamReport {
    pub fn sum_of_rows(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn consistent(&self) -> bool {
        self.total_params == self.enumerated_params
            && self.total_params == self.sum_of_rows()
            && self.rows.iter().all(|r| r.params == r.enumerated)
            && self.total_flops == self.rows.iter().map(|r| r.flops).sum::<u64>()
    }
}

/// Parameters of every module plus FLOPs of one image at `resolution`.
/// Multiply-accumulates count as two FLOPs.
pub fn count_params_flops<T: Real>(model: &Model<T>, resolution: (usize, usize)) -> Result<ParamReport> {
    let f = model.spec().downsample_factor();
    let (h, w) = resolution;
    if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::invalid(format!(
            "resolution {h}x{w} is not divisible by the downsample factor {f}"
        )));
    }
    let mut tape = Tape::new();
    let p = model.params().bind_frozen(&mut tape);
    let x = tape.constant(&Tensor::<T>::zeros([1, 3, h, w])?);
    model.forward_unchecked(&mut tape, &p, x)?;
    let flops: HashMap<String, u64> = tape.flops_by_scope().into_iter().collect();
    let total_flops = tape.total_flops();

    let net = model.network();
    let gli_by_name: HashMap<String, _> = net.blocks().map(|b| (format!("{}.gli", b.name), &b.gli)).collect();
    let rows: Vec<ModuleRow> = net
        .modules()
        .into_iter()
        .map(|(name, module)| {
            let params = module.param_count();
            let enumerated = module
                .param_ids()
                .into_iter()
                .map(|id| model.params().get(id).numel())
                .sum();
            let gli = gli_by_name.get(&name);
            let gli_formula = gli.map(|g| {
                gli_param_formula(
                    g.cfg.channels as i64,
                    g.cfg.global_channels() as i64,
                    g.cfg.local_kernel as i64,
                )
            });
            ModuleRow {
                flops: flops.get(&name).copied().unwrap_or(0),
                gli_delta: gli_formula.map(|f| params as i64 - f),
                global_params: gli.map(|g| g.global.as_ref().map_or(0, crate::nn::Module::param_count)),
                gli_formula,
                params,
                enumerated,
                name,
            }
        })
        .collect();
    Ok(ParamReport {
        resolution,
        total_params: rows.iter().map(|r| r.params).sum(),
        enumerated_params: model.params().numel(),
        total_flops,
        rows,
    })
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<26} {:>10} {:>14} {:>12} {:>10} {:>10}",
            "module", "params", "flops", "gli_formula", "gli_delta", "global"
        )?;
        let opt = |v: Option<i64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        for r in &self.rows {
            writeln!(
                f,
                "{:<26} {:>10} {:>14} {:>12} {:>10} {:>10}",
                r.name,
                r.params,
                r.flops,
                opt(r.gli_formula),
                opt(r.gli_delta),
                opt(r.global_params.map(|g| g as i64)),
            )?;
        }
        writeln!(
            f,
            "total params {} (enumerated {}), {:.3} MFLOPs at {}x{}",
            self.total_params,
            self.enumerated_params,
            self.total_flops as f64 / 1e6,
            self.resolution.0,
            self.resolution.1
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    #[test]
    fn desk_report_is_consistent() {
        let model = Model::<f32>::build(ModelSpec::desk(3), 0).unwrap();
        let report = count_params_flops(&model, (32, 32)).unwrap();
        assert!(report.consistent(), "{report}");
        assert_eq!(report.rows.iter().filter(|r| r.gli_formula.is_some()).count(), 5);
        assert!(report.rows.iter().all(|r| r.flops > 0 || r.params == 0), "{report}");
    }

    #[test]
    fn zero_split_has_no_global_params() {
        let mut spec = ModelSpec::desk(3);
        for s in &mut spec.stages {
            s.split_ratio = 0.0;
        }
        let model = Model::<f32>::build(spec, 0).unwrap();
        let report = count_params_flops(&model, (32, 32)).unwrap();
        for r in report.rows.iter().filter(|r| r.gli_formula.is_some()) {
            assert_eq!(r.global_params, Some(0));
        }
    }

    #[test]
    fn flops_grow_with_resolution() {
        let model = Model::<f32>::build(ModelSpec::desk(3), 0).unwrap();
        let small = count_params_flops(&model, (32, 32)).unwrap();
        let big = count_params_flops(&model, (64, 64)).unwrap();
        assert_eq!(small.total_params, big.total_params);
        assert!(big.total_flops > 3 * small.total_flops);
        assert!(count_params_flops(&model, (40, 40)).is_err());
    }

    #[test]
    fn doubling_channels_about_quadruples_params() {
        let base = ModelSpec::desk(3);
        let mut wide = base.clone();
        for s in &mut wide.stages {
            s.channels *= 2;
        }
        let n = |spec| Model::<f32>::build(spec, 0).unwrap().params().numel() as f64;
        let ratio = n(wide) / n(base);
        assert!((3.8..=4.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn micro_fits_gradient_check_budget() {
        let model = Model::<f64>::build(ModelSpec::micro(3), 0).unwrap();
        assert!(model.params().numel() <= 50_000);
    }
}
