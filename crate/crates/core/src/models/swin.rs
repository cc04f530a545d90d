//! Hierarchical shifted-window transformer.

use volab_tensor::{Element, Tensor, Var};

use super::config::ModelConfig;
use super::init::Init;
use super::layers::{AttentionRecord, Ctx, StageLayout};
use super::tokens::{
    effective_window, merge_gather, merge_plan, patch_plan, relative_table_len, window_partition, window_plan,
    window_reverse, Centroid, MergePlan, TokenGrid, WindowPlan,
};
use crate::error::Result;

/// Static layout of one hierarchy stage.
#[derive(Clone, Debug)]
pub struct SwinStage {
    pub grid: [usize; 3],
    pub width: usize,
    pub heads: usize,
    pub window: [usize; 3],
    /// Shift applied on odd blocks (zero on axes that cannot shift).
    pub shift: [usize; 3],
    /// Merge entering this stage (`None` for the first).
    pub merge: Option<MergePlan>,
    pub centroids: Vec<Centroid>,
}

impl SwinStage {
    pub fn window_plan(&self, block: usize, cfg: &ModelConfig) -> Result<WindowPlan> {
        let shift = if block % 2 == 1 { self.shift } else { [0; 3] };
        window_plan(self.grid, self.window, shift, cfg.pad_policy)
    }
}

pub fn schedule(cfg: &ModelConfig) -> Result<Vec<SwinStage>> {
    let patches = patch_plan(cfg.input_shape, cfg.patch_size, cfg.pad_policy)?;
    let mut grid = patches.grid;
    let mut centroids = patches.centroids;
    let mut stages = Vec::with_capacity(4);
    for s in 0..cfg.stage_depths.len() {
        let merge = if s > 0 {
            let axes = grid.map(|g| g > 1);
            let m = merge_plan(grid, &centroids, axes, cfg.pad_policy)?;
            grid = m.grid_out;
            centroids = m.centroids.clone();
            Some(m)
        } else {
            None
        };
        let (window, shiftable) = effective_window(grid, cfg.window_size);
        let shift = [0, 1, 2].map(|a| if shiftable[a] { window[a] / 2 } else { 0 });
        stages.push(SwinStage {
            grid,
            width: cfg.widths[0] << s,
            heads: cfg.heads[s],
            window,
            shift,
            merge,
            centroids: centroids.clone(),
        });
    }
    Ok(stages)
}

pub(crate) fn init(init: &mut Init, cfg: &ModelConfig) -> Result<()> {
    let stages = schedule(cfg)?;
    let c = cfg.widths[0];
    let patch_len: usize = cfg.patch_size.iter().product();
    init.linear("patch", patch_len, c, true);
    init.layer_norm("patch_norm", c);
    for (s, st) in stages.iter().enumerate() {
        if let Some(m) = &st.merge {
            let wide = m.children * (st.width / 2);
            init.layer_norm(&format!("stage{s}.merge.norm"), wide);
            init.linear(&format!("stage{s}.merge.reduction"), wide, st.width, false);
        }
        for b in 0..cfg.stage_depths[s] {
            let p = format!("stage{s}.block{b}");
            super::vit::init_block(init, &p, st.width, cfg.mlp_ratio);
            init.embedding(&format!("{p}.attn.rel_bias"), &[relative_table_len(st.window), st.heads]);
        }
    }
    init.layer_norm("norm", stages.last().map_or(c, |s| s.width));
    init.linear("head", stages.last().map_or(c, |s| s.width), 1, true);
    Ok(())
}

/// Linear patch embedding followed by layer norm, without a class token.
pub fn patch_embed<'t, E: Element>(ctx: &Ctx<'_, 't, E>, cfg: &ModelConfig, x: Var<'t, E>) -> Result<TokenGrid<'t, E>> {
    let plan = patch_plan(cfg.input_shape, cfg.patch_size, cfg.pad_policy)?;
    let s = x.shape();
    let b = s[0];
    let patches = x
        .reshape(&[b, s[1..].iter().product()])?
        .gather(1, plan.index.clone())?
        .reshape(&[b, plan.tokens(), plan.patch_len()])?;
    let tokens = ctx.layer_norm("patch_norm", ctx.linear("patch", patches)?)?;
    Ok(TokenGrid {
        tokens,
        grid: plan.grid,
        centroids: plan.centroids,
        has_cls: false,
    })
}

/// LN over concatenated children, then a bias-free linear map to the next width.
pub fn patch_merge<'t, E: Element>(ctx: &Ctx<'_, 't, E>, prefix: &str, x: Var<'t, E>, plan: &MergePlan) -> Result<Var<'t, E>> {
    let merged = merge_gather(x, plan)?;
    ctx.linear(&format!("{prefix}.reduction"), ctx.layer_norm(&format!("{prefix}.norm"), merged)?)
}

/// `[h, N, N]` relative-position bias gathered from a `[(2w-1)^k, h]` table.
fn relative_bias<'t, E: Element>(ctx: &Ctx<'_, 't, E>, name: &str, plan: &WindowPlan) -> Result<Var<'t, E>> {
    let table = ctx.p(name)?;
    let heads = table.shape()[1];
    let n = plan.window_len;
    Ok(table
        .gather(0, plan.relative.clone())?
        .reshape(&[n, n, heads])?
        .permute(&[2, 0, 1])?)
}

fn expanded_mask<E: Element>(plan: &WindowPlan, heads: usize) -> Result<Tensor<E>> {
    let nn = plan.window_len * plan.window_len;
    let mut data = Vec::with_capacity(plan.n_windows * heads * nn);
    for w in 0..plan.n_windows {
        let m = &plan.mask[w * nn..(w + 1) * nn];
        for _ in 0..heads {
            data.extend(m.iter().map(|&v| E::from_f64(v)));
        }
    }
    Ok(Tensor::from_vec(&[plan.n_windows, heads, plan.window_len, plan.window_len], data)?)
}

/// Windowed (optionally shifted) multi-head attention on `[B, L, C]`
/// tokens. Returns the output and the weights `[B · nW · h, N, N]`.
pub fn window_attention<'t, E: Element>(
    ctx: &Ctx<'_, 't, E>,
    prefix: &str,
    x: Var<'t, E>,
    heads: usize,
    plan: &WindowPlan,
) -> Result<(Var<'t, E>, Var<'t, E>)> {
    let windows = window_partition(x, plan)?;
    let bias_name = format!("{prefix}.rel_bias");
    let bias = if ctx.has(&bias_name) {
        Some(relative_bias(ctx, &bias_name, plan)?)
    } else {
        None
    };
    let mask = if plan.mask_is_open() {
        None
    } else {
        Some(ctx.constant(expanded_mask(plan, heads)?))
    };
    let (out, weights) = ctx.msa(prefix, windows, heads, bias, mask)?;
    Ok((window_reverse(out, plan)?, weights))
}

/// Scatter window attention back to dense `[h, L, L]` maps per sample.
fn record<E: Element>(ctx: &Ctx<'_, '_, E>, layer: &str, weights: &Tensor<E>, plan: &WindowPlan, heads: usize, centroids: &[Centroid]) -> Result<()> {
    let l: usize = plan.grid.iter().product();
    let n = plan.window_len;
    let batch = weights.len() / (plan.n_windows * heads * n * n);
    let data = weights.data();
    let mut records = ctx.attention.borrow_mut();
    for b in 0..batch {
        let mut dense = vec![0f32; heads * l * l];
        for w in 0..plan.n_windows {
            for h in 0..heads {
                let base = (((b * plan.n_windows + w) * heads) + h) * n * n;
                for i in 0..n {
                    let Some(ti) = plan.token_at(w, i) else { continue };
                    for j in 0..n {
                        if let Some(tj) = plan.token_at(w, j) {
                            dense[(h * l + ti) * l + tj] = data[base + i * n + j].as_f64() as f32;
                        }
                    }
                }
            }
        }
        records.push(AttentionRecord {
            layer: layer.to_string(),
            sample: b,
            heads,
            attention: Tensor::from_vec(&[heads, l, l], dense)?,
            centroids: centroids.iter().copied().map(Some).collect(),
        });
    }
    Ok(())
}

pub(crate) fn forward<'t, E: Element>(ctx: &Ctx<'_, 't, E>, cfg: &ModelConfig, x: Var<'t, E>) -> Result<Var<'t, E>> {
    let stages = schedule(cfg)?;
    let embedded = patch_embed(ctx, cfg, x)?;
    let mut h = embedded.tokens;
    ctx.stage("patch_embed", h, StageLayout::Tokens { grid: embedded.grid, cls: false });
    for (s, st) in stages.iter().enumerate() {
        if let Some(m) = &st.merge {
            h = patch_merge(ctx, &format!("stage{s}.merge"), h, m)?;
        }
        for b in 0..cfg.stage_depths[s] {
            let p = format!("stage{s}.block{b}");
            let plan = st.window_plan(b, cfg)?;
            let normed = ctx.layer_norm(&format!("{p}.ln1"), h)?;
            let (a, weights) = window_attention(ctx, &format!("{p}.attn"), normed, st.heads, &plan)?;
            if ctx.record_attention {
                record(ctx, &p, &weights.value(), &plan, st.heads, &st.centroids)?;
            }
            h = h.add(a)?;
            let f = ctx.ffn(&format!("{p}.mlp"), ctx.layer_norm(&format!("{p}.ln2"), h)?)?;
            h = h.add(f)?;
        }
        ctx.stage(format!("stage{}", s + 1), h, StageLayout::Tokens { grid: st.grid, cls: false });
    }
    let h = ctx.layer_norm("norm", h)?;
    ctx.linear("head", h.mean_axis(1)?)
}
