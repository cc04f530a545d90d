use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use volab_tensor::{BatchStats, Element, Tape, Tensor};

use super::config::TrainConfig;
use super::data::{batch_input, EpochAugment, Sample};
use super::optim::{cosine_lr, mse, squared_error_loss, AdamW};
use super::stopping::EarlyStopping;
use crate::error::{invalid, Error, Result};
use crate::models::{ForwardOptions, ModelInstance, BN_MOMENTUM};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    /// Learning rate of the epoch's last optimizer step.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelInstance,
    /// 1-based epoch the parameters come from.
    pub epoch: usize,
    pub val_mse: f64,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Epoch at which early stopping fired.
    pub stopped_at: Option<usize>,
}

/// Gradients of one effective batch: the squared error of every micro-batch
/// divided by the total sample count, so the sum equals the gradient of the
/// mean over all of them.
pub struct Accumulated<E: Element> {
    pub grads: BTreeMap<String, Vec<f64>>,
    pub sse: f64,
    pub bn_stats: Vec<(String, BatchStats<E>)>,
}

pub fn accumulate_gradients<E: Element>(
    model: &ModelInstance<E>,
    micro_batches: &[(Tensor<E>, Vec<f64>)],
    dropout_seed: u64,
) -> Result<Accumulated<E>> {
    let total: usize = micro_batches.iter().map(|(_, t)| t.len()).sum();
    if total == 0 {
        return Err(invalid("empty effective batch"));
    }
    let mut grads: BTreeMap<String, Vec<f64>> = model.params.iter().map(|(k, v)| (k.clone(), vec![0.0; v.len()])).collect();
    let mut sse = 0.0;
    let mut bn_stats = Vec::new();
    for (i, (x, y)) in micro_batches.iter().enumerate() {
        let tape = Tape::new();
        let vars = model.bind(&tape, true);
        let opts = ForwardOptions::train(seeds::derive_seed(dropout_seed, "micro", i as u64));
        let out = model.forward(&vars, tape.constant(x.clone()), &opts)?;
        let loss = squared_error_loss(out.prediction, y, total)?;
        let l = loss.item().as_f64();
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {l}")));
        }
        sse += l * total as f64;
        let g = tape.backward(loss)?;
        for (name, var) in &vars {
            if let Some(t) = g.get(*var) {
                for (a, v) in grads.get_mut(name).expect("same keys").iter_mut().zip(t.data()) {
                    *a += v.as_f64();
                }
            }
        }
        bn_stats.extend(out.bn_stats);
    }
    Ok(Accumulated { grads, sse, bn_stats })
}

/// Inference-mode predictions in sample order.
pub fn predict_samples(model: &ModelInstance, samples: &[Sample], batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = batch_input::<f32>(&model.config, &refs, None)?;
        out.extend(model.predict(&x)?);
    }
    Ok(out)
}

fn validation_mse(model: &ModelInstance, val: &[Sample], batch: usize) -> Result<f64> {
    let pred = predict_samples(model, val, batch)?;
    let target: Vec<f64> = val.iter().map(|s| s.target).collect();
    mse(&pred, &target)
}

/// Train on `train`, select the epoch with the lowest validation MSE.
pub fn train_fold(mut model: ModelInstance, train: &[Sample], val: &[Sample], cfg: &TrainConfig, seed: u64) -> Result<FoldOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(invalid("training and validation sets must be nonempty"));
    }
    let micro_per_epoch = train.len().div_ceil(cfg.physical_batch);
    let steps_per_epoch = micro_per_epoch.div_ceil(cfg.accumulation_steps);
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let mut opt = AdamW::new(cfg.betas, cfg.eps, cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.early_stop);
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut stopped_at = None;
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<&Sample> = train.iter().collect();
        order.shuffle(&mut seeds::stream(seed, "shuffle", epoch as u64));
        let aug = EpochAugment {
            config: &cfg.augment,
            seed,
            epoch,
        };
        let mut sse = 0.0;
        let mut lr = cfg.lr_max;
        let group_len = cfg.physical_batch * cfg.accumulation_steps;
        for group in order.chunks(group_len) {
            let micro = group
                .chunks(cfg.physical_batch)
                .map(|mb| {
                    let x = batch_input::<f32>(&model.config, mb, Some(aug))?;
                    Ok((x, mb.iter().map(|s| s.target).collect()))
                })
                .collect::<Result<Vec<_>>>()?;
            let acc = accumulate_gradients(&model, &micro, seeds::derive_seed(seed, "dropout", step as u64))
                .map_err(|e| annotate(e, epoch, step))?;
            sse += acc.sse;
            lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min)?;
            opt.update(&mut model.params, &acc.grads, lr).map_err(|e| annotate(e, epoch, step))?;
            model.apply_bn_stats(&acc.bn_stats, BN_MOMENTUM)?;
            step += 1;
        }
        let val_mse = validation_mse(&model, val, cfg.physical_batch)?;
        if !val_mse.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation MSE at epoch {epoch}")));
        }
        history.push(EpochRecord {
            epoch,
            train_mse: sse / train.len() as f64,
            val_mse,
            lr,
        });
        if best.as_ref().map_or(true, |b| val_mse < b.val_mse) {
            best = Some(Checkpoint {
                model: model.clone(),
                epoch,
                val_mse,
            });
        }
        if stopper.observe(val_mse) {
            stopped_at = Some(epoch);
            break;
        }
    }
    Ok(FoldOutcome {
        checkpoint: best.expect("at least one epoch"),
        history,
        stopped_at,
    })
}

fn annotate(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{msg} (epoch {epoch}, optimizer step {step})")),
        other => other,
    }
}
