use std::path::Path;
use std::sync::Arc;

use volab_tensor::{Element, Tensor};

use crate::error::{Error, Result};
use crate::labels::{read_manifest, CohortRecord};
use crate::models::{Family, ModelConfig};
use crate::seeds;
use crate::volume::{
    angle_to_slice, augment, batch_tensor, extract_bscan, read_volume, zscore_normalize, AugmentConfig, Volume,
};

/// Angular position of the B-scan used by 2D models.
pub const BSCAN_ANGLE_DEG: f64 = 90.0;

/// One labelled volume. `index` is its position in the full cohort and
/// keys its augmentation stream.
#[derive(Clone, Debug)]
pub struct Sample {
    pub index: usize,
    pub patient_id: String,
    pub eye_id: String,
    pub volume: Arc<Volume>,
    pub target: f64,
}

impl Sample {
    pub fn from_record(index: usize, record: &CohortRecord, volume: Volume) -> Self {
        Sample {
            index,
            patient_id: record.patient_id.clone(),
            eye_id: record.eye_id.clone(),
            volume: Arc::new(volume),
            target: record.p_kc,
        }
    }
}

fn stack(images: Vec<Vec<f32>>, dims: [usize; 3], spacing: [f64; 3]) -> Result<Volume> {
    Volume::new(dims, spacing, images.into_iter().flatten().collect())
}

/// What the model sees of a volume: the volume itself (3D), the 90°
/// B-scan (2D), or every slice resized to the encoder input (hybrids).
pub fn model_input(cfg: &ModelConfig, v: &Volume) -> Result<Volume> {
    let [d, h, w] = cfg.input_shape;
    let spacing = v.spacing();
    match (cfg.family, cfg.input_dims) {
        (Family::HybridLstm | Family::HybridTransformer, _) => {
            if v.dims()[0] != d {
                return Err(Error::Dimension(format!("hybrid model expects {d} slices, volume has {}", v.dims()[0])));
            }
            let slices = (0..d)
                .map(|k| extract_bscan(v, k, [h, w]).map(|img| img.data))
                .collect::<Result<Vec<_>>>()?;
            stack(slices, [d, h, w], spacing)
        }
        (_, 2) => {
            let k = angle_to_slice(BSCAN_ANGLE_DEG, v.dims()[0])?;
            stack(vec![extract_bscan(v, k, [h, w])?.data], [1, h, w], spacing)
        }
        _ => {
            if v.dims() != cfg.input_shape {
                return Err(Error::Dimension(format!("model expects {:?}, volume is {:?}", cfg.input_shape, v.dims())));
            }
            Ok(v.clone())
        }
    }
}

/// Optional per-sample augmentation for one epoch.
#[derive(Clone, Copy, Debug)]
pub struct EpochAugment<'a> {
    pub config: &'a AugmentConfig,
    pub seed: u64,
    pub epoch: usize,
}

/// Batch `[N, 1, D, H, W]` of model inputs, augmenting each volume with a
/// stream keyed by `(seed, epoch, sample index)`.
pub fn batch_input<E: Element>(cfg: &ModelConfig, samples: &[&Sample], aug: Option<EpochAugment>) -> Result<Tensor<E>> {
    let inputs = samples
        .iter()
        .map(|s| {
            let v = match aug {
                Some(a) if a.config.flip || a.config.rotate || a.config.deform => {
                    let mut rng = seeds::stream(a.seed, &format!("augment/{}", a.epoch), s.index as u64);
                    augment(&s.volume, a.config, &mut rng)?
                }
                _ => (*s.volume).clone(),
            };
            model_input(cfg, &v)
        })
        .collect::<Result<Vec<_>>>()?;
    batch_tensor(&inputs.iter().collect::<Vec<_>>())
}

/// Manifest rows and their z-scored volumes; relative volume paths resolve
/// against the manifest's directory.
pub fn load_samples(manifest: &Path) -> Result<(Vec<CohortRecord>, Vec<Sample>)> {
    let records = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let samples = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let v = zscore_normalize(&read_volume(&base.join(&r.volume_path))?)?;
            Ok(Sample::from_record(i, r, v))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((records, samples))
}
