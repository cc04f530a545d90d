//! Vision transformer over 2D or 3D patches with a class token.

use std::sync::Arc;

use volab_tensor::{Element, Var};

use super::config::ModelConfig;
use super::init::Init;
use super::layers::{Ctx, StageLayout};
use super::tokens::{patch_plan, PatchPlan, TokenGrid};
use crate::error::Result;

pub(crate) fn plan(cfg: &ModelConfig) -> Result<PatchPlan> {
    patch_plan(cfg.input_shape, cfg.patch_size, cfg.pad_policy)
}

pub(crate) fn init(init: &mut Init, cfg: &ModelConfig) -> Result<()> {
    let plan = plan(cfg)?;
    let d = cfg.widths[0];
    init.linear("patch", plan.patch_len(), d, true);
    init.embedding("cls", &[1, 1, d]);
    init.embedding("pos", &[plan.tokens() + 1, d]);
    for i in 0..cfg.stage_depths[0] {
        init_block(init, &format!("block{i}"), d, cfg.mlp_ratio);
    }
    init.layer_norm("norm", d);
    init.linear("head", d, 1, true);
    Ok(())
}

pub(crate) fn init_block(init: &mut Init, p: &str, d: usize, mlp_ratio: usize) {
    init.layer_norm(&format!("{p}.ln1"), d);
    init.linear(&format!("{p}.attn.qkv"), d, 3 * d, true);
    init.linear(&format!("{p}.attn.proj"), d, d, true);
    init.layer_norm(&format!("{p}.ln2"), d);
    init.linear(&format!("{p}.mlp.fc1"), d, mlp_ratio * d, true);
    init.linear(&format!("{p}.mlp.fc2"), mlp_ratio * d, d, true);
}

/// Repeat a `[1, 1, D]` token over the batch.
pub(crate) fn broadcast_token<'t, E: Element>(token: Var<'t, E>, batch: usize) -> Result<Var<'t, E>> {
    let index: Arc<[u32]> = vec![0u32; batch].into();
    Ok(token.gather(0, index)?)
}

/// Patchify `[B, 1, D, H, W]`, project, prepend the class token and add
/// positional embeddings.
pub fn patch_embed<'t, E: Element>(ctx: &Ctx<'_, 't, E>, cfg: &ModelConfig, x: Var<'t, E>) -> Result<TokenGrid<'t, E>> {
    let plan = plan(cfg)?;
    let s = x.shape();
    let b = s[0];
    let patches = x
        .reshape(&[b, s[1..].iter().product()])?
        .gather(1, plan.index.clone())?
        .reshape(&[b, plan.tokens(), plan.patch_len()])?;
    let embedded = ctx.linear("patch", patches)?;
    let cls = broadcast_token(ctx.p("cls")?, b)?;
    let tokens = Var::concat(&[cls, embedded], 1)?.add(ctx.p("pos")?)?;
    Ok(TokenGrid {
        tokens,
        grid: plan.grid,
        centroids: plan.centroids,
        has_cls: true,
    })
}

pub(crate) fn forward<'t, E: Element>(ctx: &Ctx<'_, 't, E>, cfg: &ModelConfig, x: Var<'t, E>) -> Result<Var<'t, E>> {
    let grid = patch_embed(ctx, cfg, x)?;
    let centroids: Vec<_> = std::iter::once(None)
        .chain(grid.centroids.iter().copied().map(Some))
        .collect();
    let mut h = grid.tokens;
    for i in 0..cfg.stage_depths[0] {
        let name = format!("block{i}");
        h = ctx.encoder_block(&name, h, cfg.heads[0], 0.0, Some(&centroids))?;
        ctx.stage(
            name,
            h,
            StageLayout::Tokens {
                grid: grid.grid,
                cls: true,
            },
        );
    }
    let h = ctx.layer_norm("norm", h)?;
    let d = h.shape()[2];
    let cls = h.slice(1, 0, 1)?.reshape(&[h.shape()[0], d])?;
    ctx.linear("head", cls)
}
