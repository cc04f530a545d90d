use std::path::Path;

use serde::{Deserialize, Serialize};
use volab_tensor::{Element, Tape, Tensor};

use super::distance::{BinnedDistances, DistanceOptions, DistanceStats};
use super::erf::{erf_maps, ErfMap, ERF_THRESHOLD};
use super::rf::table4_taps;
use crate::error::{invalid, Error, Result};
use crate::labels::RiskBin;
use crate::models::{ForwardOptions, ModelInstance};
use crate::training::io::{read_rows, write_rows};

/// `model,dim,stage1,stage2,stage3,stage4,et_ratio`: ERF radius (voxels) at
/// each Table-4 tap, and the E/T ratio of the deepest one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table4Row {
    pub model: String,
    pub dim: usize,
    pub stage1: Option<f64>,
    pub stage2: Option<f64>,
    pub stage3: Option<f64>,
    pub stage4: Option<f64>,
    pub et_ratio: Option<f64>,
}

/// `model,dim,bin,mean,sd,median,pct_gt20,max`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table5Row {
    pub model: String,
    pub dim: usize,
    /// `healthy`, `subclinical`, `keratoconus` or `overall`.
    pub bin: String,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub median: Option<f64>,
    pub pct_gt20: Option<f64>,
    pub max: Option<f64>,
}

pub const TABLE4_HEADER: &str = "model,dim,stage1,stage2,stage3,stage4,et_ratio";
pub const TABLE5_HEADER: &str = "model,dim,bin,mean,sd,median,pct_gt20,max";

impl Table5Row {
    fn new(model: &str, dim: usize, bin: &str, s: Option<&DistanceStats>) -> Self {
        Table5Row {
            model: model.into(),
            dim,
            bin: bin.into(),
            mean: s.map(|s| s.mean),
            sd: s.map(|s| s.sd),
            median: s.map(|s| s.median),
            pct_gt20: s.map(|s| s.pct_gt20),
            max: s.map(|s| s.max),
        }
    }
}

/// ERF maps averaged over every sample of `batches`, at `taps` (the
/// Table-4 taps of the model when `None`; at most four fill the row).
pub fn erf_report<E: Element>(
    model: &ModelInstance<E>,
    id: &str,
    batches: &[Tensor<E>],
    taps: Option<&[String]>,
) -> Result<(Table4Row, Vec<ErfMap>)> {
    let taps = taps.map_or_else(|| table4_taps(&model.config), <[String]>::to_vec);
    if taps.is_empty() || taps.len() > 4 {
        return Err(invalid(format!("Table-4 rows take 1 to 4 taps, got {}", taps.len())));
    }
    let maps = erf_maps(model, batches, &taps, ERF_THRESHOLD)?;
    let radius = |i: usize| maps.get(i).map(|m| m.erf_radius);
    let row = Table4Row {
        model: id.into(),
        dim: model.config.input_dims,
        stage1: radius(0),
        stage2: radius(1),
        stage3: radius(2),
        stage4: radius(3),
        et_ratio: maps.last().and_then(|m| m.et_ratio),
    };
    Ok((row, maps))
}

/// Attention distances pooled per true-label risk bin. `targets` holds the
/// soft label of every sample of `batches`, in order.
pub fn attention_report<E: Element>(
    model: &ModelInstance<E>,
    id: &str,
    batches: &[Tensor<E>],
    targets: &[f64],
    opts: DistanceOptions,
) -> Result<(Vec<Table5Row>, BinnedDistances)> {
    if !model.config.family.has_attention() {
        return Err(invalid("model has no attention layers"));
    }
    let total: usize = batches.iter().map(|b| b.shape()[0]).sum();
    if total != targets.len() {
        return Err(Error::Dimension(format!("{total} samples but {} targets", targets.len())));
    }
    let mut binned = BinnedDistances::default();
    let mut offset = 0;
    for batch in batches {
        let tape = Tape::new();
        let vars = model.bind(&tape, false);
        let out = model.forward(&vars, tape.constant(batch.clone()), &ForwardOptions::recording())?;
        let b = batch.shape()[0];
        for s in 0..b {
            let recs: Vec<_> = out.attention.iter().filter(|r| r.sample == s).cloned().collect();
            binned.add(targets[offset + s], &recs, opts)?;
        }
        offset += b;
    }
    let (per, overall) = binned.stats()?;
    let dim = model.config.input_dims;
    let mut rows: Vec<Table5Row> = RiskBin::ALL
        .iter()
        .zip(&per)
        .map(|(bin, s)| Table5Row::new(id, dim, bin.name(), s.as_ref()))
        .collect();
    rows.push(Table5Row::new(id, dim, "overall", Some(&overall)));
    Ok((rows, binned))
}

pub fn write_table4(path: &Path, rows: &[Table4Row]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_table4(path: &Path) -> Result<Vec<Table4Row>> {
    read_rows(path)
}

pub fn write_table5(path: &Path, rows: &[Table5Row]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_table5(path: &Path) -> Result<Vec<Table5Row>> {
    read_rows(path)
}

/// Raw ERF map as CSV `z,y,x,gradient,normalized,mask` for external plotting.
pub fn write_erf_map(path: &Path, map: &ErfMap) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        z: usize,
        y: usize,
        x: usize,
        gradient: f64,
        normalized: f64,
        mask: u8,
    }
    let [_, h, w] = map.shape;
    let rows: Vec<Row> = (0..map.gradient.len())
        .map(|i| Row {
            z: i / (h * w),
            y: (i / w) % h,
            x: i % w,
            gradient: map.gradient[i],
            normalized: map.normalized[i],
            mask: u8::from(map.mask[i]),
        })
        .collect();
    write_rows(path, &rows)
}
