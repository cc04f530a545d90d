use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use volab_tensor::{read_checkpoint, write_checkpoint};

use super::cv::Prediction;
use super::fold::{Checkpoint, EpochRecord};
use crate::error::{io_err, Error, Result};
use crate::models::{ModelConfig, ModelInstance};

pub const CHECKPOINT_FILE: &str = "checkpoint.vlck";
pub const CHECKPOINT_META_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    val_mse: f64,
    model: ModelConfig,
}

/// Parameters to `checkpoint.vlck`, epoch / validation MSE / model config
/// to `checkpoint.json`.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(CHECKPOINT_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    write_checkpoint(&mut w, &ckpt.model.named_tensors())?;
    w.flush().map_err(io_err(&path))?;
    let meta = CheckpointMeta {
        epoch: ckpt.epoch,
        val_mse: ckpt.val_mse,
        model: ckpt.model.config.clone(),
    };
    write_json(&dir.join(CHECKPOINT_META_FILE), &meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join(CHECKPOINT_META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    meta.model.validate()?;
    let path = dir.join(CHECKPOINT_FILE);
    let tensors = read_checkpoint(BufReader::new(File::open(&path).map_err(io_err(&path))?))?;
    if !meta.val_mse.is_finite() {
        return Err(Error::Format(format!("{}: non-finite validation MSE", meta_path.display())));
    }
    Ok(Checkpoint {
        model: ModelInstance::from_named_tensors(&meta.model, tensors)?,
        epoch: meta.epoch,
        val_mse: meta.val_mse,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub(crate) fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path)(io),
        other => Error::Format(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

pub(crate) fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// `epoch,train_mse,val_mse,lr`
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_rows(path, history)
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    read_rows(path)
}

/// `index,patient_id,eye_id,fold,target,prediction`
pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    write_rows(path, predictions)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    read_rows(path)
}
