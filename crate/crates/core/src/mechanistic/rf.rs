use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::{swin_schedule, BlockKind, Family, ModelConfig};

/// Largest input region (in voxels, per axis) that can influence one unit
/// of a stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalRf {
    pub extent: [usize; 3],
    pub radius: f64,
}

impl TheoreticalRf {
    /// Local fields report half the largest per-axis extent.
    pub fn local(extent: [usize; 3]) -> Self {
        let longest = extent.iter().copied().max().unwrap_or(1);
        TheoreticalRf {
            extent,
            radius: (longest as f64 - 1.0) / 2.0,
        }
    }

    /// Global fields report the half-diagonal of the span.
    pub fn global(extent: [usize; 3]) -> Self {
        let d2: f64 = extent.iter().map(|&e| (e as f64 - 1.0).powi(2)).sum();
        TheoreticalRf {
            extent,
            radius: d2.sqrt() / 2.0,
        }
    }
}

/// Receptive-field growth through `(kernel, stride)` layers on one axis.
pub fn compose_rf(layers: &[(usize, usize)]) -> usize {
    let mut rf = 1;
    let mut jump = 1;
    for &(k, s) in layers {
        rf += (k - 1) * jump;
        jump *= s;
    }
    rf
}

/// Kernel and stride sequence along the residual path up to the end of
/// stage `upto` (1-based), for one axis.
fn cnn_layers(cfg: &ModelConfig, upto: usize, flat_axis: bool) -> Vec<(usize, usize)> {
    let ax = |k: usize, s: usize| if flat_axis { (1, 1) } else { (k, s) };
    let mut layers = vec![ax(cfg.stem_kernel, 2), ax(3, 2)];
    for (si, &depth) in cfg.stage_depths.iter().enumerate().take(upto) {
        for b in 0..depth {
            let stride = if si > 0 && b == 0 { 2 } else { 1 };
            match cfg.block {
                BlockKind::Basic => layers.extend([ax(3, stride), ax(3, 1)]),
                BlockKind::Bottleneck => layers.extend([ax(1, 1), ax(3, stride), ax(1, 1)]),
            }
        }
    }
    layers
}

fn cnn_rf(cfg: &ModelConfig, input: [usize; 3], upto: usize, flat: bool) -> [usize; 3] {
    [0, 1, 2].map(|a| compose_rf(&cnn_layers(cfg, upto, flat && a == 0)).min(input[a]))
}

/// Index parsed from `"{prefix}{i}"` when it lies in `range`.
fn stage_index(stage: &str, prefix: &str, range: std::ops::RangeInclusive<usize>) -> Option<usize> {
    let i: usize = stage.strip_prefix(prefix)?.parse().ok()?;
    range.contains(&i).then_some(i)
}

/// Voxel interval `[lo, hi]` seen by each token, one list per axis.
type Intervals = [Vec<(usize, usize)>; 3];

/// Exact Swin receptive extents, by propagating per-axis voxel intervals
/// through windowed blocks and merges. Tokens interact only when they share
/// `floor((p - shift) / window)` on every axis, so reachability factorizes
/// by axis and every reachable set stays an interval.
fn swin_extents(cfg: &ModelConfig, upto: usize) -> Result<[usize; 3]> {
    let stages = swin_schedule(cfg)?;
    let input = cfg.input_shape;
    let first = stages.first().ok_or_else(|| invalid("swin without stages"))?;
    let mut iv: Intervals = [0, 1, 2].map(|a| {
        let p = cfg.patch_size[a];
        (0..first.grid[a]).map(|t| (t * p, ((t + 1) * p).min(input[a]) - 1)).collect()
    });
    for (st, &depth) in stages.iter().zip(&cfg.stage_depths).take(upto) {
        if st.merge.is_some() {
            for (a, axis) in iv.iter_mut().enumerate() {
                if axis.len() == st.grid[a] {
                    continue;
                }
                *axis = (0..st.grid[a])
                    .map(|u| {
                        let kids = &axis[2 * u..(2 * u + 2).min(axis.len())];
                        (kids.iter().map(|k| k.0).min().unwrap(), kids.iter().map(|k| k.1).max().unwrap())
                    })
                    .collect();
            }
        }
        for b in 0..depth {
            let shift = if b % 2 == 1 { st.shift } else { [0; 3] };
            for (a, axis) in iv.iter_mut().enumerate() {
                let seg = |p: usize| (p as i64 - shift[a] as i64).div_euclid(st.window[a] as i64);
                let mut out = axis.clone();
                for (t, slot) in out.iter_mut().enumerate() {
                    let members = (0..axis.len()).filter(|&u| seg(u) == seg(t));
                    let (lo, hi) = members.fold((usize::MAX, 0), |(lo, hi), u| (lo.min(axis[u].0), hi.max(axis[u].1)));
                    *slot = (lo, hi);
                }
                *axis = out;
            }
        }
    }
    Ok([0, 1, 2].map(|a| iv[a].iter().map(|&(lo, hi)| hi - lo + 1).max().unwrap_or(1)))
}

/// Theoretical receptive field of a stage tap (`"output"` for the
/// prediction).
///
/// CNN stages compose kernels and strides along the residual path and are
/// clamped to the input. Swin stages use exact window/shift/merge
/// reachability. Both report half the largest extent. ViT blocks, hybrid
/// stages (which follow global pooling) and the output see the full span
/// and report its half-diagonal.
pub fn theoretical_rf(cfg: &ModelConfig, stage: &str) -> Result<TheoreticalRf> {
    let input = cfg.input_shape;
    let unknown = || invalid(format!("unknown stage {stage:?} for {}", cfg.name));
    if stage == "output" {
        return Ok(TheoreticalRf::global(input));
    }
    match cfg.family {
        Family::Cnn => {
            let s = stage_index(stage, "stage", 1..=cfg.stage_depths.len()).ok_or_else(unknown)?;
            Ok(TheoreticalRf::local(cnn_rf(cfg, input, s, cfg.input_dims == 2)))
        }
        Family::Vit => {
            stage_index(stage, "block", 0..=cfg.stage_depths[0] - 1).ok_or_else(unknown)?;
            Ok(TheoreticalRf::global(input))
        }
        Family::Swin => {
            let s = if stage == "patch_embed" {
                0
            } else {
                stage_index(stage, "stage", 1..=cfg.stage_depths.len()).ok_or_else(unknown)?
            };
            Ok(TheoreticalRf::local(swin_extents(cfg, s)?))
        }
        Family::HybridLstm | Family::HybridTransformer => match stage {
            "encoder" => Ok(TheoreticalRf::global([1, input[1], input[2]])),
            "aggregator" => Ok(TheoreticalRf::global(input)),
            _ => Err(unknown()),
        },
    }
}

/// Stage taps reported in the four Table-4 columns: the residual or
/// hierarchical stages, ViT blocks at depth quartiles, or encoder and
/// aggregator for hybrids.
pub fn table4_taps(cfg: &ModelConfig) -> Vec<String> {
    match cfg.family {
        Family::Cnn | Family::Swin => (1..=cfg.stage_depths.len()).map(|s| format!("stage{s}")).collect(),
        Family::Vit => {
            let l = cfg.stage_depths[0];
            (1..=4).map(|j| format!("block{}", (j * l).div_ceil(4).max(1) - 1)).collect()
        }
        Family::HybridLstm | Family::HybridTransformer => vec!["encoder".into(), "aggregator".into()],
    }
}
