//! ResNet encoders (2D and 3D) and the CNN regressor.

use volab_tensor::{Element, PoolKind, Var};

use super::config::{BlockKind, ModelConfig};
use super::init::Init;
use super::layers::{Ctx, StageLayout};
use crate::error::Result;

/// Kernel, stride and padding for a cubic `k` with stride `s`; the depth
/// axis collapses to 1 / 1 / 0 for 2D encoders.
fn geom(k: usize, s: usize, flat: bool) -> ([usize; 3], [usize; 3], [usize; 3]) {
    let p = k / 2;
    if flat {
        ([1, k, k], [1, s, s], [0, p, p])
    } else {
        ([k; 3], [s; 3], [p; 3])
    }
}

pub(crate) fn init_encoder(init: &mut Init, cfg: &ModelConfig, prefix: &str, flat: bool) {
    let (k, _, _) = geom(cfg.stem_kernel, 2, flat);
    init.conv(&format!("{prefix}stem.conv"), cfg.widths[0], 1, k);
    init.batch_norm(&format!("{prefix}stem.bn"), cfg.widths[0]);
    let e = cfg.block.expansion();
    let mut in_ch = cfg.widths[0];
    for (s, (&depth, &w)) in cfg.stage_depths.iter().zip(&cfg.widths).enumerate() {
        for b in 0..depth {
            let p = format!("{prefix}stage{s}.block{b}");
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let (k1, _, _) = geom(1, 1, flat);
            let (k3, _, _) = geom(3, 1, flat);
            match cfg.block {
                BlockKind::Basic => {
                    init.conv(&format!("{p}.conv1"), w, in_ch, k3);
                    init.batch_norm(&format!("{p}.bn1"), w);
                    init.conv(&format!("{p}.conv2"), w, w, k3);
                    init.batch_norm(&format!("{p}.bn2"), w);
                }
                BlockKind::Bottleneck => {
                    init.conv(&format!("{p}.conv1"), w, in_ch, k1);
                    init.batch_norm(&format!("{p}.bn1"), w);
                    init.conv(&format!("{p}.conv2"), w, w, k3);
                    init.batch_norm(&format!("{p}.bn2"), w);
                    init.conv(&format!("{p}.conv3"), w * e, w, k1);
                    init.batch_norm(&format!("{p}.bn3"), w * e);
                }
            }
            if stride != 1 || in_ch != w * e {
                init.conv(&format!("{p}.down"), w * e, in_ch, k1);
                init.batch_norm(&format!("{p}.down_bn"), w * e);
            }
            in_ch = w * e;
        }
    }
}

fn block<'t, E: Element>(
    ctx: &Ctx<'_, 't, E>,
    kind: BlockKind,
    p: &str,
    x: Var<'t, E>,
    stride: usize,
    flat: bool,
) -> Result<Var<'t, E>> {
    let (_, s1, p0) = geom(1, 1, flat);
    let (_, s, pad) = geom(3, stride, flat);
    let (_, _, pad1) = geom(3, 1, flat);
    let (_, sd, _) = geom(1, stride, flat);
    let y = match kind {
        BlockKind::Basic => {
            let h = ctx.batch_norm(&format!("{p}.bn1"), ctx.conv(&format!("{p}.conv1"), x, s, pad)?)?.relu()?;
            ctx.batch_norm(&format!("{p}.bn2"), ctx.conv(&format!("{p}.conv2"), h, s1, pad1)?)?
        }
        BlockKind::Bottleneck => {
            let h = ctx.batch_norm(&format!("{p}.bn1"), ctx.conv(&format!("{p}.conv1"), x, s1, p0)?)?.relu()?;
            let h = ctx.batch_norm(&format!("{p}.bn2"), ctx.conv(&format!("{p}.conv2"), h, s, pad)?)?.relu()?;
            ctx.batch_norm(&format!("{p}.bn3"), ctx.conv(&format!("{p}.conv3"), h, s1, p0)?)?
        }
    };
    let shortcut = if ctx.has(&format!("{p}.down.weight")) {
        ctx.batch_norm(&format!("{p}.down_bn"), ctx.conv(&format!("{p}.down"), x, sd, p0)?)?
    } else {
        x
    };
    Ok(y.add(shortcut)?.relu()?)
}

/// Stem, residual stages and global average pooling: `[N, 1, D, H, W]` to
/// `[N, F]`. With `taps`, each residual stage output is recorded.
pub(crate) fn encode<'t, E: Element>(
    ctx: &Ctx<'_, 't, E>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var<'t, E>,
    flat: bool,
    taps: bool,
) -> Result<Var<'t, E>> {
    let (_, s, p) = geom(cfg.stem_kernel, 2, flat);
    let mut h = ctx
        .batch_norm(&format!("{prefix}stem.bn"), ctx.conv(&format!("{prefix}stem.conv"), x, s, p)?)?
        .relu()?;
    let (w, s, p) = geom(3, 2, flat);
    h = h.pool3d(PoolKind::Max, w, s, p)?;
    for (si, &depth) in cfg.stage_depths.iter().enumerate() {
        for b in 0..depth {
            let stride = if si > 0 && b == 0 { 2 } else { 1 };
            h = block(ctx, cfg.block, &format!("{prefix}stage{si}.block{b}"), h, stride, flat)?;
        }
        if taps {
            ctx.stage(format!("stage{}", si + 1), h, StageLayout::Volume);
        }
    }
    Ok(h.global_avg_pool()?)
}

pub(crate) fn init(init: &mut Init, cfg: &ModelConfig) {
    init_encoder(init, cfg, "", cfg.input_dims == 2);
    init.linear("head", cfg.cnn_feature_width(), 1, true);
}

pub(crate) fn forward<'t, E: Element>(ctx: &Ctx<'_, 't, E>, cfg: &ModelConfig, x: Var<'t, E>) -> Result<Var<'t, E>> {
    let f = encode(ctx, cfg, "", x, cfg.input_dims == 2, true)?;
    ctx.linear("head", f)
}
