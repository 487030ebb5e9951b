use std::collections::BTreeMap;
use std::path::Path;

use eatformer::data::{load_splits, synth_splits, Dataset, SplitManifest};
use eatformer::io::write_atomic;
use eatformer::model::{count_params_flops, load_checkpoint, save_checkpoint, AnyModel, ParamReport};
use eatformer::tensor::{Fault, OpKind};
use eatformer::train::{evaluate, history_csv, train as fit, MetricReport, TrainOptions};
use eatformer::verify::{self, Suite, VerifyOptions};
use eatformer::{DType, Error, Model, Real};
use log::{info, warn};
use serde_json::json;

use crate::config::{ConfigMap, DatasetKind, RunConfig};
use crate::Failure;

pub const CONFIG_FILE: &str = "config.resolved";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const SPLIT_FILE: &str = "split.manifest";

/// Train and validation sets as described by the data section.
fn load_data(cfg: &RunConfig, resolution: usize) -> Result<(Dataset, Dataset), Failure> {
    let d = &cfg.data;
    let (train, val) = match &d.kind {
        DatasetKind::Synth => synth_splits(d.train_per_class, d.val_per_class, resolution, d.seed)?,
        DatasetKind::Gtsrb(dir) => {
            let loaded = load_splits(dir, resolution, d.seed)?;
            if !loaded.report.skipped.is_empty() {
                warn!(
                    "skipped {} unreadable files under {}",
                    loaded.report.skipped.len(),
                    dir.display()
                );
            }
            let cap = (d.per_class > 0).then_some(d.per_class);
            if d.classes.is_empty() && cap.is_none() {
                (loaded.train, loaded.val)
            } else {
                let classes: Vec<usize> = if d.classes.is_empty() {
                    (0..loaded.train.num_classes()).collect()
                } else {
                    d.classes.clone()
                };
                (
                    loaded.train.select_classes(&classes, cap)?,
                    loaded.val.select_classes(&classes, cap)?,
                )
            }
        }
    };
    if train.is_empty() || val.is_empty() {
        return Err(Failure::config(format!(
            "dataset has {} training and {} validation images; both must be non-empty",
            train.len(),
            val.len()
        )));
    }
    let train = if d.permute_labels {
        train.with_decorrelated_labels(d.seed ^ 0x5eed)
    } else {
        train
    };
    Ok((train, val))
}

pub fn train(map: &ConfigMap) -> Result<(), Failure> {
    let mut cfg = RunConfig::from_map(map).map_err(Failure::violations)?;
    let (train_set, val_set) = load_data(&cfg, cfg.model.input_resolution.0)?;
    cfg.model.num_classes = train_set.num_classes();
    cfg.model.validate()?;
    let out = cfg.output_dir("train");
    info!(
        "training on {} images ({} classes), validating on {}; artifacts in {}",
        train_set.len(),
        train_set.num_classes(),
        val_set.len(),
        out.display()
    );
    write_atomic(out.join(CONFIG_FILE), cfg.resolved().as_bytes())?;
    let manifest = SplitManifest::from_datasets(&train_set, &val_set, None)?;
    write_atomic(out.join(SPLIT_FILE), manifest.to_string().as_bytes())?;
    match cfg.optim.precision {
        DType::F32 => train_typed::<f32>(&cfg, &train_set, &val_set, &out),
        DType::F64 => train_typed::<f64>(&cfg, &train_set, &val_set, &out),
    }
}

fn train_typed<T: Real>(cfg: &RunConfig, train_set: &Dataset, val_set: &Dataset, out: &Path) -> Result<(), Failure> {
    let mut model = Model::<T>::build(cfg.model.clone(), cfg.seed)?;
    let opts = TrainOptions {
        seed: cfg.seed,
        threads: cfg.threads,
        record_time: !cfg.verification,
        eval_batch: cfg.eval_batch,
    };
    let ckpt = out.join(CHECKPOINT_FILE);
    let outcome = fit(
        &mut model,
        train_set,
        val_set,
        &cfg.optim,
        &cfg.augment,
        &opts,
        &mut |ev| {
            write_atomic(out.join(HISTORY_FILE), history_csv(ev.history).as_bytes())?;
            if ev.improved {
                let meta = BTreeMap::from([
                    ("epoch".to_string(), ev.record.epoch.to_string()),
                    ("val_acc".to_string(), ev.record.val_acc.to_string()),
                ]);
                save_checkpoint(&ckpt, ev.model, &meta)?;
            }
            Ok(())
        },
    );
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ Error::NumericFailure(_)) => {
            if ckpt.is_file() {
                warn!("last good checkpoint kept at {}", ckpt.display());
            }
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let mut best = model;
    *best.params_mut() = outcome.best_params;
    let (_, val) = evaluate(&best, val_set, cfg.eval_batch)?;
    let (_, train) = evaluate(&best, train_set, cfg.eval_batch)?;
    let metrics = json!({
        "best_epoch": outcome.best_epoch,
        "best_val_acc": outcome.best_val_acc,
        "val": val,
        "train": train,
    });
    write_atomic(out.join(METRICS_FILE), pretty(&metrics).as_bytes())?;
    info!(
        "best epoch {}: val_acc {:.4}, train_acc {:.4}",
        outcome.best_epoch, val.accuracy, train.accuracy
    );
    Ok(())
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub fn eval(checkpoint: &Path, map: &ConfigMap, split: &str, per_class: bool) -> Result<(), Failure> {
    let cfg = RunConfig::from_map(map).map_err(Failure::violations)?;
    let (ckpt, model) = load_checkpoint(checkpoint)?;
    let (train_set, val_set) = load_data(&cfg, ckpt.spec.input_resolution.0)?;
    let data = match split {
        "val" => val_set,
        "train" => train_set,
        other => return Err(Failure::config(format!("--split {other:?} must be val or train"))),
    };
    if data.num_classes() != ckpt.spec.num_classes {
        return Err(Failure::config(format!(
            "checkpoint predicts {} classes but the {split} set has {}",
            ckpt.spec.num_classes,
            data.num_classes()
        )));
    }
    let (_, report): (_, MetricReport) = match &model {
        AnyModel::F32(m) => evaluate(m, &data, cfg.eval_batch)?,
        AnyModel::F64(m) => evaluate(m, &data, cfg.eval_batch)?,
    };
    let mut value = serde_json::to_value(&report).expect("serializable");
    if !per_class {
        value.as_object_mut().expect("struct").remove("per_class");
    }
    print!("{}", pretty(&value));
    Ok(())
}

fn parse_fault(s: &str) -> Result<Fault, Failure> {
    let (name, factor) = match s.split_once(':') {
        Some((n, f)) => (
            n,
            f.parse()
                .map_err(|_| Failure::config(format!("fault factor {f:?} is not a number")))?,
        ),
        None => (s, 1.01),
    };
    let kind = OpKind::from_name(name).ok_or_else(|| {
        let names: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
        Failure::config(format!("unknown op {name:?}; expected one of {}", names.join(", ")))
    })?;
    Ok(Fault { kind, factor })
}

pub fn verify(selector: &str, seed: u64, fault: Option<&str>, as_json: bool) -> Result<(), Failure> {
    let suites = Suite::parse_selector(selector)?;
    let opts = VerifyOptions {
        seed,
        fault: fault.map(parse_fault).transpose()?,
    };
    if let Some(f) = &opts.fault {
        warn!("backward rule of {} scaled by {}", f.kind, f.factor);
    }
    let report = verify::run(&suites, &opts)?;
    if as_json {
        print!("{}", pretty(&report));
    } else {
        println!("{report}");
        for s in &suites {
            println!("{s}: max error {:.3e}", report.max_err(*s));
        }
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<_> = report.failures().map(|c| c.name.as_str()).collect();
        Err(Failure {
            code: Failure::VERIFY,
            message: format!("failed checks: {}", names.join(", ")),
        })
    }
}

pub fn params(map: &ConfigMap, classes: usize, as_json: bool) -> Result<(), Failure> {
    let cfg = RunConfig::from_map(map).map_err(Failure::violations)?;
    let mut spec = cfg.model;
    spec.num_classes = classes;
    spec.validate()?;
    let resolution = spec.input_resolution;
    let model = Model::<f32>::build(spec, 0)?;
    let report = count_params_flops(&model, resolution)?;
    if as_json {
        print!("{}", pretty(&report));
    } else {
        print!("{}", table(&report));
    }
    Ok(())
}

fn table(r: &ParamReport) -> String {
    let opt = |v: Option<i64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
    let optu = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
    let mut rows = vec![[
        "module".to_string(),
        "params".into(),
        "flops".into(),
        "gli_formula".into(),
        "gli_delta".into(),
        "global_params".into(),
    ]];
    for m in &r.rows {
        rows.push([
            m.name.clone(),
            m.params.to_string(),
            m.flops.to_string(),
            opt(m.gli_formula),
            opt(m.gli_delta),
            optu(m.global_params),
        ]);
    }
    rows.push([
        "total".into(),
        r.total_params.to_string(),
        r.total_flops.to_string(),
        String::new(),
        String::new(),
        String::new(),
    ]);
    let mut widths = [0usize; 6];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = format!("input {}x{}\n", r.resolution.0, r.resolution.1);
    for row in &rows {
        let mut line = format!("{:<w$}", row[0], w = widths[0]);
        for (cell, w) in row.iter().zip(widths).skip(1) {
            line.push_str(&format!("  {cell:>w$}"));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out.push_str(&format!(
        "enumerated {} parameters; self-report {}\n",
        r.enumerated_params,
        if r.consistent() { "agrees" } else { "DISAGREES" }
    ));
    out
}
