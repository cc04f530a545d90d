use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use volab::labels::{stratified_patient_split, CohortRecord};
use volab::models::{build_model, ModelConfig};
use volab::training::{
    accumulate_gradients, best_epoch, cosine_lr, cross_validate, fold_partition, load_checkpoint, mse, mse_loss,
    read_history, read_predictions, save_checkpoint, stopping_epoch, train_fold, write_history, write_predictions,
    AdamW, EarlyStopConfig, EarlyStopping, Sample, TrainConfig,
};
use volab::volume::{generate_phantom, zscore_normalize, AugmentConfig, PhantomSpec, Volume};
use volab_tensor::{grad_check, Tape, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

// ---- loss ----

#[test]
fn mse_examples() {
    assert_eq!(mse(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    assert_eq!(mse(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
    assert!(mse(&[0.0], &[1.0, 0.0]).is_err());
    assert!(mse(&[], &[]).is_err());
}

#[test]
fn mse_gradient_is_scaled_residual() {
    let target = [0.2, 0.9, 0.4, 0.6];
    let pred = Tensor::<f64>::from_vec(&[4], vec![0.5, 0.1, 0.4, 0.8]).unwrap();
    let tape = Tape::new();
    let x = tape.param(pred.clone());
    let g = tape.backward(mse_loss(x, &target).unwrap()).unwrap();
    for ((gi, p), t) in g.get(x).unwrap().data().iter().zip(pred.data()).zip(target) {
        assert!((gi - 2.0 * (p - t) / 4.0).abs() < 1e-15);
    }
    let err = grad_check(
        |_tape, x| mse_loss(x, &target).map_err(|e| volab_tensor::TensorError::InvalidArgument { op: "mse", detail: e.to_string() }),
        &pred,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

// ---- optimizer and schedule ----

fn single(name: &str, v: f64) -> BTreeMap<String, Tensor<f64>> {
    BTreeMap::from([(name.to_string(), Tensor::from_vec(&[1], vec![v]).unwrap())])
}

fn grad(name: &str, g: f64) -> BTreeMap<String, Vec<f64>> {
    BTreeMap::from([(name.to_string(), vec![g])])
}

#[test]
fn zero_gradient_without_decay_changes_nothing() {
    let mut p = single("w", 0.7);
    let mut opt = AdamW::new([0.9, 0.999], 1e-8, 0.0);
    for _ in 0..3 {
        opt.update(&mut p, &grad("w", 0.0), 0.1).unwrap();
    }
    assert_eq!(p["w"].data()[0], 0.7);
}

#[test]
fn first_adam_step_moves_by_the_learning_rate() {
    // m̂ = g and v̂ = g² on step one, so the step is lr · g / |g|
    let mut p = single("w", 1.0);
    let mut opt = AdamW::new([0.9, 0.999], 1e-12, 0.0);
    opt.update(&mut p, &grad("w", 1.0), 0.1).unwrap();
    assert!((p["w"].data()[0] - 0.9).abs() < 1e-10);
}

#[test]
fn second_adam_step_matches_closed_form() {
    let (b1, b2, lr) = (0.9f64, 0.999f64, 0.05);
    let (g1, g2) = (0.5, -2.0);
    let mut p = single("w", 1.0);
    let mut opt = AdamW::new([b1, b2], 1e-12, 0.0);
    opt.update(&mut p, &grad("w", g1), lr).unwrap();
    opt.update(&mut p, &grad("w", g2), lr).unwrap();
    let m = b1 * (1.0 - b1) * g1 + (1.0 - b1) * g2;
    let v = b2 * (1.0 - b2) * g1 * g1 + (1.0 - b2) * g2 * g2;
    let step2 = lr * (m / (1.0 - b1 * b1)) / (v / (1.0 - b2 * b2)).sqrt();
    let want = 1.0 - lr - step2;
    assert!((p["w"].data()[0] - want).abs() < 1e-10);
}

#[test]
fn weight_decay_is_decoupled() {
    let mut p = single("w", 2.0);
    let mut opt = AdamW::new([0.9, 0.999], 1e-8, 0.1);
    opt.update(&mut p, &grad("w", 0.0), 0.5).unwrap();
    assert!((p["w"].data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
}

#[test]
fn identical_parameters_update_identically() {
    let mut p = BTreeMap::from([
        ("a".to_string(), Tensor::from_vec(&[2], vec![0.3, -0.1]).unwrap()),
        ("b".to_string(), Tensor::from_vec(&[2], vec![0.3, -0.1]).unwrap()),
    ]);
    let g = BTreeMap::from([("a".to_string(), vec![0.2, 1.5]), ("b".to_string(), vec![0.2, 1.5])]);
    let mut opt = AdamW::new([0.9, 0.999], 1e-8, 0.01);
    for _ in 0..4 {
        opt.update(&mut p, &g, 0.01).unwrap();
    }
    assert_eq!(p["a"], p["b"]);
}

#[test]
fn non_finite_gradient_is_rejected() {
    let mut p = single("w", 1.0);
    let mut opt = AdamW::new([0.9, 0.999], 1e-8, 0.0);
    let err = opt.update(&mut p, &grad("w", f64::NAN), 0.1).unwrap_err();
    assert!(err.is_numeric());
    assert_eq!(p["w"].data()[0], 1.0);
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5).unwrap(), 1e-3);
    assert!((cosine_lr(100, 100, 1e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
    assert!((cosine_lr(50, 100, 1e-3, 1e-5).unwrap() - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
    assert!(cosine_lr(0, 0, 1e-3, 0.0).is_err());
    assert!(cosine_lr(5, 4, 1e-3, 0.0).is_err());
}

proptest! {
    #[test]
    fn cosine_schedule_never_increases(total in 1usize..500, lo in 0.0f64..1e-3, span in 0.0f64..1e-2) {
        let hi = lo + span;
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(s, total, hi, lo).unwrap();
            prop_assert!(lr <= prev + 1e-18 && lr >= lo - 1e-18 && lr <= hi + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn early_stopping_waits_for_patience(trace in prop::collection::vec(0.0f64..1.0, 1..30), patience in 1usize..6) {
        let cfg = EarlyStopConfig { min_delta: 0.001, patience };
        if let Some(e) = stopping_epoch(&trace, cfg) {
            prop_assert!(e >= patience + 1);
        }
    }
}

// ---- early stopping and selection ----

#[test]
fn scripted_trace_stops_after_fourth_epoch() {
    let cfg = EarlyStopConfig::default();
    assert_eq!(stopping_epoch(&[0.50, 0.4995, 0.4991, 0.4989], cfg), Some(4));
    // against the first epoch only, the fourth value would count as an
    // improvement (0.0011); tracking the running best is what stops here
    let mut es = EarlyStopping::new(cfg);
    let flags: Vec<bool> = [0.50, 0.4995, 0.4991, 0.4989].iter().map(|&v| es.observe(v)).collect();
    assert_eq!(flags, vec![false, false, false, true]);
    assert_eq!(es.best(), Some(0.4989));
}

#[test]
fn steady_improvement_never_stops() {
    let trace: Vec<f64> = (0..50).map(|i| 0.5 - 0.002 * i as f64).collect();
    assert_eq!(stopping_epoch(&trace, EarlyStopConfig::default()), None);
}

#[test]
fn large_improvement_resets_the_counter() {
    let trace = [0.5, 0.5, 0.5, 0.4, 0.4, 0.4, 0.4];
    assert_eq!(stopping_epoch(&trace, EarlyStopConfig::default()), Some(7));
}

#[test]
fn best_epoch_is_first_argmin() {
    assert_eq!(best_epoch(&[0.3, 0.1, 0.2, 0.1]), Some(2));
    assert_eq!(best_epoch(&[]), None);
}

// ---- data ----

fn phantom_samples(n: usize, shape: [usize; 3], amplitude: impl Fn(usize) -> f64) -> (Vec<CohortRecord>, Vec<Sample>) {
    let mut records = Vec::new();
    let mut samples = Vec::new();
    for i in 0..n {
        let ph = generate_phantom(&PhantomSpec::new(shape, amplitude(i), 0.2, 0.05, 100 + i as u64)).unwrap();
        let r = CohortRecord {
            patient_id: format!("p{:03}", i / 2),
            eye_id: if i % 2 == 0 { "OD".into() } else { "OS".into() },
            volume_path: format!("v{i}.volb"),
            p_kc: ph.p_kc,
            age: None,
            sex: None,
        };
        samples.push(Sample::from_record(i, &r, zscore_normalize(&ph.volume).unwrap()));
        records.push(r);
    }
    (records, samples)
}

fn tiny_cnn() -> ModelConfig {
    ModelConfig {
        stage_depths: vec![1, 1, 1, 1],
        widths: vec![2, 2, 4, 4],
        input_shape: [8, 8, 8],
        ..ModelConfig::desk_cnn3d()
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        physical_batch: 4,
        accumulation_steps: 1,
        max_epochs: 3,
        augment: AugmentConfig::disabled(),
        ..TrainConfig::desk()
    }
}

// ---- gradient accumulation ----

#[test]
fn accumulated_micro_batches_equal_one_large_batch() {
    // ViT has no batch norm, so the batch split cannot change the gradient
    let cfg = ModelConfig::desk_vit2d();
    let model = build_model(&cfg, 3).unwrap();
    let x = randn(&[8, 1, 1, 32, 32], 4).cast::<f32>();
    let y: Vec<f64> = (0..8).map(|i| i as f64 / 8.0).collect();
    let whole = accumulate_gradients(&model, &[(x.clone(), y.clone())], 0).unwrap();
    let micro: Vec<(Tensor<f32>, Vec<f64>)> = (0..4)
        .map(|k| {
            let data = x.data()[k * 2 * 1024..(k + 1) * 2 * 1024].to_vec();
            (Tensor::from_vec(&[2, 1, 1, 32, 32], data).unwrap(), y[2 * k..2 * k + 2].to_vec())
        })
        .collect();
    let split = accumulate_gradients(&model, &micro, 0).unwrap();
    assert!((whole.sse - split.sse).abs() < 1e-5);
    let mut worst: f64 = 0.0;
    for (name, g) in &whole.grads {
        for (a, b) in g.iter().zip(&split.grads[name]) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-5, "gradient difference {worst}");

}

// ---- fold training ----

#[test]
fn checkpoint_is_argmin_of_validation_history() {
    let (_, samples) = phantom_samples(12, [8, 8, 8], |i| (i % 3) as f64);
    let model = build_model(&tiny_cnn(), 1).unwrap();
    let cfg = TrainConfig {
        max_epochs: 6,
        early_stop: EarlyStopConfig { min_delta: 0.001, patience: 6 },
        ..quick_train()
    };
    let out = train_fold(model, &samples[..8], &samples[8..], &cfg, 5).unwrap();
    let vals: Vec<f64> = out.history.iter().map(|h| h.val_mse).collect();
    assert_eq!(Some(out.checkpoint.epoch), best_epoch(&vals));
    assert_eq!(out.checkpoint.val_mse, vals[out.checkpoint.epoch - 1]);
    let stop = stopping_epoch(&vals, cfg.early_stop);
    assert_eq!(out.stopped_at, stop);
    assert_eq!(out.history.len(), stop.unwrap_or(cfg.max_epochs));
    let lrs: Vec<f64> = out.history.iter().map(|h| h.lr).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn fold_training_is_deterministic() {
    let (_, samples) = phantom_samples(10, [8, 8, 8], |i| (i % 2) as f64 * 2.0);
    let mut cfg = quick_train();
    cfg.augment = AugmentConfig::default();
    let run = || train_fold(build_model(&tiny_cnn(), 2).unwrap(), &samples[..6], &samples[6..], &cfg, 9).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.checkpoint, b.checkpoint);
}

#[test]
fn nan_loss_aborts_with_diagnostic() {
    let (_, samples) = phantom_samples(6, [8, 8, 8], |_| 1.0);
    let mut model = build_model(&tiny_cnn(), 0).unwrap();
    model.params.insert("head.bias".into(), Tensor::from_vec(&[1], vec![f32::NAN]).unwrap());
    let err = train_fold(model, &samples[..4], &samples[4..], &quick_train(), 0).unwrap_err();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn empty_sets_are_rejected() {
    let (_, samples) = phantom_samples(2, [8, 8, 8], |_| 1.0);
    let model = build_model(&tiny_cnn(), 0).unwrap();
    assert!(train_fold(model, &samples, &[], &quick_train(), 0).is_err());
}

// ---- cross-validation ----

#[test]
fn cross_validation_predicts_every_record_once() {
    let (records, samples) = phantom_samples(20, [8, 8, 8], |i| (i % 5) as f64 * 0.5);
    let folds = stratified_patient_split(&records, 3, 5, 1).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        ..quick_train()
    };
    let out = cross_validate(&samples, &folds, 5, &tiny_cnn(), &cfg, 1, &|_, _| {}).unwrap();
    assert_eq!(out.folds.len(), 5);
    let idx: Vec<usize> = out.predictions.iter().map(|p| p.index).collect();
    assert_eq!(idx, (0..20).collect::<Vec<_>>());
    for p in &out.predictions {
        assert_eq!(p.fold, folds[p.index]);
        assert_eq!(p.target, records[p.index].p_kc);
    }
    let parallel = cross_validate(&samples, &folds, 5, &tiny_cnn(), &cfg, 3, &|_, _| {}).unwrap();
    assert_eq!(parallel.predictions, out.predictions);
}

#[test]
fn fold_partitions_keep_patients_apart() {
    let (records, _) = phantom_samples(40, [4, 4, 4], |_| 0.0);
    let folds = stratified_patient_split(&records, 3, 5, 7).unwrap();
    for k in 0..5 {
        let (train, val, test) = fold_partition(&folds, 5, k);
        assert_eq!(train.len() + val.len() + test.len(), 40);
        let patients = |ix: &[usize]| ix.iter().map(|&i| records[i].patient_id.clone()).collect::<std::collections::BTreeSet<_>>();
        let (pt, pv, ps) = (patients(&train), patients(&val), patients(&test));
        assert!(pt.is_disjoint(&ps) && pt.is_disjoint(&pv) && pv.is_disjoint(&ps));
        assert!(val.iter().all(|&i| folds[i] == (k + 1) % 5));
    }
}

#[test]
fn too_few_folds_is_an_error() {
    let (_, samples) = phantom_samples(4, [8, 8, 8], |_| 0.0);
    assert!(cross_validate(&samples, &[0, 1, 0, 1], 2, &tiny_cnn(), &quick_train(), 1, &|_, _| {}).is_err());
}

// ---- persistence ----

#[test]
fn checkpoint_history_and_predictions_round_trip() {
    let (records, samples) = phantom_samples(20, [8, 8, 8], |i| (i % 4) as f64 * 0.5);
    let folds = stratified_patient_split(&records, 3, 5, 3).unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..quick_train()
    };
    let out = cross_validate(&samples, &folds, 5, &tiny_cnn(), &cfg, 1, &|_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let fold = &out.folds[0];
    save_checkpoint(dir.path(), &fold.checkpoint).unwrap();
    assert_eq!(load_checkpoint(dir.path()).unwrap(), fold.checkpoint);
    let h = dir.path().join("history.csv");
    write_history(&h, &fold.history).unwrap();
    assert_eq!(read_history(&h).unwrap(), fold.history);
    let header = std::fs::read_to_string(&h).unwrap();
    assert!(header.starts_with("epoch,train_mse,val_mse,lr\n"));
    let p = dir.path().join("predictions.csv");
    write_predictions(&p, &out.predictions).unwrap();
    assert_eq!(read_predictions(&p).unwrap(), out.predictions);
}

// ---- learning ----

/// Twenty volumes, half healthy (amplitude 0) and half strongly perturbed,
/// trained full-batch: the training loss falls every epoch after the second.
#[test]
fn training_loss_decreases_for_every_family() {
    let mut configs = ModelConfig::desk_presets();
    configs.retain(|c| c.input_shape == [32, 32, 32]);
    let (_, samples) = phantom_samples(24, [32, 32, 32], |i| if i % 2 == 0 { 0.0 } else { 2.0 });
    let (train, val) = samples.split_at(20);
    for mcfg in configs {
        // full-batch steps: a fifth of the family's desk learning rate
        let desk = TrainConfig::desk_for(&mcfg);
        let cfg = TrainConfig {
            physical_batch: 20,
            accumulation_steps: 1,
            max_epochs: 8,
            lr_max: desk.lr_max / 5.0,
            early_stop: EarlyStopConfig { min_delta: 0.001, patience: 8 },
            augment: AugmentConfig::disabled(),
            ..desk
        };
        let out = train_fold(build_model(&mcfg, 11).unwrap(), train, val, &cfg, 4).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|h| h.train_mse).collect();
        for w in losses[1..].windows(2) {
            assert!(w[1] < w[0], "{}: {losses:?}", mcfg.name);
        }
    }
}

#[test]
fn samples_share_volumes() {
    let v = Volume::zeros([2, 2, 2], [1.0; 3]).unwrap();
    let r = CohortRecord {
        patient_id: "a".into(),
        eye_id: "OD".into(),
        volume_path: "a.volb".into(),
        p_kc: 0.3,
        age: None,
        sex: None,
    };
    let s = Sample::from_record(4, &r, v);
    let t = s.clone();
    assert!(Arc::ptr_eq(&s.volume, &t.volume));
    assert_eq!((s.index, s.target), (4, 0.3));
}

#[test]
fn desk_learning_rates_by_family() {
    assert_eq!(TrainConfig::desk_for(&ModelConfig::desk_cnn3d()).lr_max, 1e-3);
    assert_eq!(TrainConfig::desk_for(&ModelConfig::desk_swin3d()).lr_max, 5e-4);
    let d = TrainConfig::desk();
    assert_eq!((d.physical_batch, d.accumulation_steps, d.effective_batch()), (8, 1, 8));
    let full = TrainConfig::default();
    assert_eq!((full.physical_batch, full.accumulation_steps, full.effective_batch()), (16, 8, 128));
    assert_eq!(full.betas, [0.9, 0.999]);
}
