//! MSE regression training: AdamW with cosine decay, gradient
//! accumulation, early stopping on validation MSE, and patient-grouped
//! cross-validation.

mod config;
mod cv;
mod data;
mod fold;
pub(crate) mod io;
mod optim;
mod stopping;

pub use config::{EarlyStopConfig, TrainConfig};
pub use cv::{cross_validate, fold_partition, run_fold, CvOutcome, Prediction};
pub use data::{batch_input, load_samples, model_input, EpochAugment, Sample, BSCAN_ANGLE_DEG};
pub use fold::{accumulate_gradients, predict_samples, train_fold, Accumulated, Checkpoint, EpochRecord, FoldOutcome};
pub use io::{
    load_checkpoint, read_history, read_predictions, save_checkpoint, write_history, write_json, write_predictions,
    CHECKPOINT_FILE, CHECKPOINT_META_FILE,
};
pub use optim::{cosine_lr, mse, mse_loss, squared_error_loss, AdamW};
pub use stopping::{best_epoch, stopping_epoch, EarlyStopping};
