use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::Sample;
use super::fold::{predict_samples, train_fold, FoldOutcome};
use crate::error::{invalid, Result};
use crate::models::{build_model, ModelConfig};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub index: usize,
    pub patient_id: String,
    pub eye_id: String,
    pub fold: usize,
    pub target: f64,
    pub prediction: f64,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    /// One per sample, in sample order.
    pub predictions: Vec<Prediction>,
}

/// Sample positions for fold `k`: training, validation (fold `k + 1 mod K`)
/// and test (fold `k`).
pub fn fold_partition(assignment: &[usize], n_folds: usize, k: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let val_fold = (k + 1) % n_folds;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (i, &f) in assignment.iter().enumerate() {
        if f == k {
            test.push(i);
        } else if f == val_fold {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val, test)
}

fn pick(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

/// Train and test one fold; parameters are initialized from a seed derived
/// from the master seed and the fold index.
pub fn run_fold(
    samples: &[Sample],
    assignment: &[usize],
    n_folds: usize,
    k: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(FoldOutcome, Vec<Prediction>)> {
    let (train, val, test) = fold_partition(assignment, n_folds, k);
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(invalid(format!("fold {k} has an empty train, validation or test set")));
    }
    let model = build_model(model_cfg, seeds::derive_seed(train_cfg.seed, "init", k as u64))?;
    let seed = seeds::derive_seed(train_cfg.seed, "fold", k as u64);
    let outcome = train_fold(model, &pick(samples, &train), &pick(samples, &val), train_cfg, seed)?;
    let test_samples = pick(samples, &test);
    let pred = predict_samples(&outcome.checkpoint.model, &test_samples, train_cfg.physical_batch)?;
    let predictions = test_samples
        .iter()
        .zip(pred)
        .map(|(s, p)| Prediction {
            index: s.index,
            patient_id: s.patient_id.clone(),
            eye_id: s.eye_id.clone(),
            fold: k,
            target: s.target,
            prediction: p,
        })
        .collect();
    Ok((outcome, predictions))
}

/// K-fold cross-validation over a precomputed fold assignment. Folds run
/// on up to `threads` worker threads; results do not depend on the count.
pub fn cross_validate(
    samples: &[Sample],
    assignment: &[usize],
    n_folds: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    threads: usize,
    on_fold: &(dyn Fn(usize, &FoldOutcome) + Sync),
) -> Result<CvOutcome> {
    if n_folds < 3 {
        return Err(invalid("cross-validation needs at least three folds (train, validation, test)"));
    }
    if assignment.len() != samples.len() || assignment.iter().any(|&f| f >= n_folds) {
        return Err(invalid("fold assignment does not match the samples"));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(FoldOutcome, Vec<Prediction>)>>>> = Mutex::new((0..n_folds).map(|_| None).collect());
    let work = || loop {
        let k = next.fetch_add(1, Ordering::SeqCst);
        if k >= n_folds {
            break;
        }
        let r = run_fold(samples, assignment, n_folds, k, model_cfg, train_cfg);
        if let Ok((outcome, _)) = &r {
            on_fold(k, outcome);
        }
        results.lock().expect("no panics while holding the lock")[k] = Some(r);
    };
    let threads = threads.clamp(1, n_folds);
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(work);
            }
        });
    }
    let mut folds = Vec::with_capacity(n_folds);
    let mut predictions = Vec::with_capacity(samples.len());
    for r in results.into_inner().expect("workers finished") {
        let (outcome, preds) = r.expect("every fold ran")?;
        folds.push(outcome);
        predictions.extend(preds);
    }
    predictions.sort_by_key(|p| p.index);
    Ok(CvOutcome { folds, predictions })
}
