use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::metrics::{ConfusionCounts, MetricReport};
use super::optim::{adam_step, AdamState, OptimConfig};
use crate::data::{augment, batch_iter, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Running accuracy over the epoch's (augmented) mini-batches.
    pub train_acc: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_acc,seconds";

/// CSV with [`HISTORY_HEADER`]; floats use shortest round-trip formatting.
pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            r.epoch, r.train_loss, r.train_acc, r.val_acc, r.seconds
        ));
    }
    out
}

pub fn parse_history_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(HISTORY_HEADER) {
        return Err(Error::Format(format!("history must start with {HISTORY_HEADER:?}")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Format(format!("history row {}: {line:?}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            Ok(EpochRecord {
                epoch: f[0].trim().parse().map_err(|_| bad())?,
                train_loss: num(f[1])?,
                train_acc: num(f[2])?,
                val_acc: num(f[3])?,
                seconds: num(f[4])?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Drives shuffling; augmentation draws come from the policy's own seed.
    pub seed: u64,
    /// Worker threads for the per-batch gradient. Chunks are reduced in a
    /// fixed order, so any fixed value is reproducible.
    pub threads: usize,
    /// When false the `seconds` column is written as 0 so that runs compare
    /// byte for byte.
    pub record_time: bool,
    pub eval_batch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            seed: 0,
            threads: 1,
            record_time: true,
            eval_batch: 100,
        }
    }
}

pub struct EpochEvent<'a, T: Real> {
    pub record: &'a EpochRecord,
    pub history: &'a [EpochRecord],
    pub model: &'a Model<T>,
    /// Validation accuracy beat every earlier epoch.
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best_params: ParamStore<T>,
}

fn check_compatible<T: Real>(model: &Model<T>, data: &Dataset, what: &str) -> Result<()> {
    let spec = model.spec();
    if data.num_classes() != spec.num_classes {
        return Err(Error::invalid(format!(
            "{what} set has {} classes but the model predicts {}",
            data.num_classes(),
            spec.num_classes
        )));
    }
    if (data.resolution, data.resolution) != spec.input_resolution {
        return Err(Error::invalid(format!(
            "{what} images are {r}x{r} but the model expects {:?}",
            spec.input_resolution,
            r = data.resolution
        )));
    }
    Ok(())
}

/// Mean loss, predictions and per-parameter gradients.
pub type BatchGradients<T> = (T, Vec<usize>, Vec<Vec<T>>);

/// Mean loss, predictions and mean gradients of a batch, optionally split
/// into contiguous chunks evaluated on separate threads.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    threads: usize,
) -> Result<BatchGradients<T>> {
    let b = labels.len();
    let chunks = threads.clamp(1, b.max(1));
    if chunks == 1 {
        return model.loss_and_grads(images, labels);
    }
    let per = images.numel() / b;
    let bounds: Vec<(usize, usize)> = (0..chunks).map(|i| (i * b / chunks, (i + 1) * b / chunks)).collect();
    let results: Vec<Result<BatchGradients<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = bounds
            .iter()
            .map(|&(lo, hi)| {
                s.spawn(move || {
                    let mut shape = images.shape().to_vec();
                    shape[0] = hi - lo;
                    let part = Tensor::new(shape, images.data()[lo * per..hi * per].to_vec())?;
                    model.loss_and_grads(&part, &labels[lo..hi])
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    });
    let mut loss = T::zero();
    let mut preds = Vec::with_capacity(b);
    let mut grads: Option<Vec<Vec<T>>> = None;
    for (res, &(lo, hi)) in results.into_iter().zip(&bounds) {
        let (l, p, g) = res?;
        let w = T::of((hi - lo) as f64 / b as f64);
        loss += l * w;
        preds.extend(p);
        match &mut grads {
            None => grads = Some(g.into_iter().map(|v| v.into_iter().map(|x| x * w).collect()).collect()),
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    for (a, x) in a.iter_mut().zip(v) {
                        *a += x * w;
                    }
                }
            }
        }
    }
    Ok((loss, preds, grads.unwrap_or_default()))
}

/// Arg-max predictions for every sample, in dataset order.
pub fn predict_dataset<T: Real>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    for batch in batch_iter(data, batch_size.max(1), None)? {
        preds.extend(model.predict(&batch.images.cast())?);
    }
    Ok(preds)
}

pub fn evaluate<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<(ConfusionCounts, MetricReport)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    check_compatible(model, data, "evaluation")?;
    let preds = predict_dataset(model, data, batch_size)?;
    let counts = ConfusionCounts::from_predictions(data.num_classes(), &data.labels(), &preds)?;
    let report = MetricReport::from_counts(&counts, &data.class_names);
    Ok((counts, report))
}

/// Mini-batch Adam on cross-entropy. After every epoch the validation
/// accuracy is measured and `on_epoch` is called (e.g. to write artifacts).
/// A non-finite loss or gradient aborts with a numeric failure; whatever
/// `on_epoch` last persisted stays valid.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &OptimConfig,
    policy: &AugmentPolicy,
    opts: &TrainOptions,
    on_epoch: &mut dyn FnMut(EpochEvent<'_, T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    policy.validate()?;
    check_compatible(model, train_set, "training")?;
    check_compatible(model, val_set, "validation")?;
    let mut state = AdamState::new(model.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore<T>)> = None;
    let n = train_set.len() as u64;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, batch) in batch_iter(train_set, cfg.batch_size, Some((opts.seed, epoch as u64)))?.enumerate() {
            let images = if policy.is_identity() {
                batch.images.cast::<T>()
            } else {
                let r = train_set.resolution;
                let mut data = Vec::with_capacity(batch.images.numel());
                for &i in &batch.indices {
                    let s = augment(&train_set.samples[i], policy, epoch as u64 * n + i as u64);
                    data.extend(s.image.data().iter().map(|&v| T::of(f64::from(v))));
                }
                Tensor::new([batch.indices.len(), 3, r, r], data)?
            };
            let (loss, preds, grads) =
                batch_gradients(model, &images, &batch.labels, opts.threads).map_err(|e| match e {
                    Error::NumericFailure(msg) => {
                        Error::NumericFailure(format!("epoch {} batch {bi}: {msg}", epoch + 1))
                    }
                    other => other,
                })?;
            loss_sum += loss.as_f64() * batch.labels.len() as f64;
            correct += preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
            adam_step(model.params_mut(), &grads, &mut state, cfg).map_err(|e| match e {
                Error::NumericFailure(msg) => Error::NumericFailure(format!("epoch {} batch {bi}: {msg}", epoch + 1)),
                other => other,
            })?;
        }
        let (_, val) = evaluate(model, val_set, opts.eval_batch)?;
        let elapsed = started.elapsed().as_secs_f64();
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val_acc: val.accuracy,
            seconds: if opts.record_time { elapsed } else { 0.0 },
        };
        info!(
            "epoch {:>3} loss {:.4} train_acc {:.4} val_acc {:.4} ({:.1}s)",
            record.epoch, record.train_loss, record.train_acc, record.val_acc, elapsed
        );
        let improved = best.as_ref().is_none_or(|b| record.val_acc > b.1);
        if improved {
            best = Some((record.epoch, record.val_acc, model.params().clone()));
        }
        history.push(record);
        on_epoch(EpochEvent {
            record: history.last().expect("just pushed"),
            history: &history,
            model,
            improved,
        })?;
    }
    let (best_epoch, best_val_acc, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_acc,
        best_params,
    })
}
