//! Index plans for patchify, shifted-window partition and patch merging.
//!
//! Every plan is a list of gather indices (with [`GATHER_ZERO`] marking a
//! zero-filled pad slot), so the tensor engine moves tokens around with one
//! differentiable primitive.

use std::sync::Arc;

use volab_tensor::{Element, Var, GATHER_ZERO};

use super::config::PadPolicy;
use crate::error::{invalid, Result};

/// Spatial centre of a token in input voxel coordinates `(z, y, x)`.
pub type Centroid = [f64; 3];

/// Tokens `[B, L(+1), D]` laid out row-major over `grid`, with an optional
/// leading class token that carries no centroid.
#[derive(Clone, Debug)]
pub struct TokenGrid<'t, E: Element> {
    pub tokens: Var<'t, E>,
    pub grid: [usize; 3],
    pub centroids: Vec<Centroid>,
    pub has_cls: bool,
}

impl<E: Element> TokenGrid<'_, E> {
    pub fn len(&self) -> usize {
        self.grid.iter().product::<usize>() + usize::from(self.has_cls)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn row_major(grid: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    (0..grid[0]).flat_map(move |z| (0..grid[1]).flat_map(move |y| (0..grid[2]).map(move |x| [z, y, x])))
}

fn flat(p: [usize; 3], dims: [usize; 3]) -> usize {
    (p[0] * dims[1] + p[1]) * dims[2] + p[2]
}

fn grid_for(extent: [usize; 3], block: [usize; 3], policy: PadPolicy, what: &str) -> Result<[usize; 3]> {
    let mut g = [0; 3];
    for a in 0..3 {
        if extent[a] % block[a] != 0 && policy == PadPolicy::Strict {
            return Err(invalid(format!("{what} {block:?} does not divide {extent:?}")));
        }
        g[a] = extent[a].div_ceil(block[a]);
    }
    Ok(g)
}

/// Non-overlapping patches of a single-channel `[D, H, W]` input.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPlan {
    pub grid: [usize; 3],
    pub patch: [usize; 3],
    /// `L · P` voxel indices, patch-major.
    pub index: Arc<[u32]>,
    pub centroids: Vec<Centroid>,
}

impl PatchPlan {
    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn patch_len(&self) -> usize {
        self.patch.iter().product()
    }
}

pub fn patch_plan(input: [usize; 3], patch: [usize; 3], policy: PadPolicy) -> Result<PatchPlan> {
    let grid = grid_for(input, patch, policy, "patch")?;
    let mut index = Vec::with_capacity(grid.iter().product::<usize>() * patch.iter().product::<usize>());
    let mut centroids = Vec::new();
    for g in row_major(grid) {
        let start = [0, 1, 2].map(|a| g[a] * patch[a]);
        centroids.push([0, 1, 2].map(|a| start[a] as f64 + (patch[a] - 1) as f64 / 2.0));
        for d in row_major(patch) {
            let v = [0, 1, 2].map(|a| start[a] + d[a]);
            index.push(if (0..3).all(|a| v[a] < input[a]) {
                flat(v, input) as u32
            } else {
                GATHER_ZERO
            });
        }
    }
    Ok(PatchPlan {
        grid,
        patch,
        index: index.into(),
        centroids,
    })
}

/// Window actually used on `grid`: clipped to the grid, and shiftable only
/// along axes where the grid is larger than the window.
pub fn effective_window(grid: [usize; 3], window: [usize; 3]) -> ([usize; 3], [bool; 3]) {
    let w = [0, 1, 2].map(|a| window[a].min(grid[a]));
    let shiftable = [0, 1, 2].map(|a| grid[a] > window[a]);
    (w, shiftable)
}

/// Additive mask value for forbidden pairs; finite so softmax stays finite.
pub const MASK_NEG: f64 = -1e9;

/// Cyclic shift by `shift` followed by partition into windows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPlan {
    pub grid: [usize; 3],
    pub padded: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub n_windows: usize,
    pub window_len: usize,
    /// `n_windows · window_len` original token indices (pad slots zero).
    pub forward: Arc<[u32]>,
    /// For each original token, its slot in the window order.
    pub inverse: Arc<[u32]>,
    /// `[n_windows, N, N]` additive mask, 0 or [`MASK_NEG`].
    pub mask: Vec<f64>,
    /// Relative-position bias index per `(i, j)` pair within a window.
    pub relative: Arc<[u32]>,
}

impl WindowPlan {
    pub fn mask_is_open(&self) -> bool {
        self.mask.iter().all(|&m| m == 0.0)
    }

    /// Original token index at window `w`, slot `n`, or `None` for padding.
    pub fn token_at(&self, w: usize, n: usize) -> Option<usize> {
        let t = self.forward[w * self.window_len + n];
        (t != GATHER_ZERO).then_some(t as usize)
    }
}

pub fn relative_table_len(window: [usize; 3]) -> usize {
    window.iter().map(|&w| 2 * w - 1).product()
}

pub fn window_plan(grid: [usize; 3], window: [usize; 3], shift: [usize; 3], policy: PadPolicy) -> Result<WindowPlan> {
    for a in 0..3 {
        if window[a] == 0 || shift[a] >= window[a] {
            return Err(invalid(format!("shift {shift:?} must be smaller than window {window:?}")));
        }
    }
    let counts = grid_for(grid, window, policy, "window")?;
    let padded = [0, 1, 2].map(|a| counts[a] * window[a]);
    let n_windows: usize = counts.iter().product();
    let window_len: usize = window.iter().product();
    let mut forward = Vec::with_capacity(n_windows * window_len);
    let mut region = Vec::with_capacity(n_windows * window_len);
    for wpos in row_major(counts) {
        for local in row_major(window) {
            // position in the shifted frame, then back to the original frame
            let q = [0, 1, 2].map(|a| wpos[a] * window[a] + local[a]);
            let p = [0, 1, 2].map(|a| (q[a] + shift[a]) % padded[a]);
            let real = (0..3).all(|a| p[a] < grid[a]);
            forward.push(if real { flat(p, grid) as u32 } else { GATHER_ZERO });
            // tokens may attend to each other only if they share the same
            // unshifted neighbourhood floor((p - s) / w) on every axis
            region.push([0, 1, 2].map(|a| (p[a] as i64 - shift[a] as i64).div_euclid(window[a] as i64)));
        }
    }
    let mut inverse = vec![0u32; grid.iter().product()];
    for (slot, &t) in forward.iter().enumerate() {
        if t != GATHER_ZERO {
            inverse[t as usize] = slot as u32;
        }
    }
    let mut mask = vec![0.0; n_windows * window_len * window_len];
    for w in 0..n_windows {
        for i in 0..window_len {
            for j in 0..window_len {
                let (si, sj) = (w * window_len + i, w * window_len + j);
                let ok = forward[sj] != GATHER_ZERO && region[si] == region[sj];
                if !ok {
                    mask[(w * window_len + i) * window_len + j] = MASK_NEG;
                }
            }
        }
    }
    let locals: Vec<[usize; 3]> = row_major(window).collect();
    let span = window.map(|w| 2 * w - 1);
    let mut relative = Vec::with_capacity(window_len * window_len);
    for a in &locals {
        for b in &locals {
            let r = [0, 1, 2].map(|k| a[k] + window[k] - 1 - b[k]);
            relative.push(flat(r, span) as u32);
        }
    }
    Ok(WindowPlan {
        grid,
        padded,
        window,
        shift,
        n_windows,
        window_len,
        forward: forward.into(),
        inverse: inverse.into(),
        mask,
        relative: relative.into(),
    })
}

/// `[B, L, D]` tokens to `[B · nW, N, D]` windows.
pub fn window_partition<'t, E: Element>(tokens: Var<'t, E>, plan: &WindowPlan) -> Result<Var<'t, E>> {
    let s = tokens.shape();
    let (b, d) = (s[0], s[2]);
    Ok(tokens
        .gather(1, plan.forward.clone())?
        .reshape(&[b * plan.n_windows, plan.window_len, d])?)
}

/// Inverse of [`window_partition`]: `[B · nW, N, D]` back to `[B, L, D]`.
pub fn window_reverse<'t, E: Element>(windows: Var<'t, E>, plan: &WindowPlan) -> Result<Var<'t, E>> {
    let s = windows.shape();
    let b = s[0] / plan.n_windows;
    Ok(windows
        .reshape(&[b, plan.n_windows * plan.window_len, s[2]])?
        .gather(1, plan.inverse.clone())?)
}

/// 2 × 2 (× 2) neighbourhood merge.
#[derive(Clone, Debug, PartialEq)]
pub struct MergePlan {
    pub grid_in: [usize; 3],
    pub grid_out: [usize; 3],
    pub factor: [usize; 3],
    /// `L' · m` source token indices, child-major within each new token.
    pub index: Arc<[u32]>,
    pub children: usize,
    pub centroids: Vec<Centroid>,
}

/// Merge plan halving every axis in `axes`. Odd axes are an error under
/// the strict policy and zero-padded otherwise; merged centroids are the
/// mean of the real children.
pub fn merge_plan(grid: [usize; 3], centroids: &[Centroid], axes: [bool; 3], policy: PadPolicy) -> Result<MergePlan> {
    if centroids.len() != grid.iter().product::<usize>() {
        return Err(invalid("centroid count does not match the grid"));
    }
    let factor = axes.map(|m| if m { 2 } else { 1 });
    let grid_out = grid_for(grid, factor, policy, "merge factor").map_err(|_| invalid(format!("cannot merge odd grid {grid:?}")))?;
    let children: usize = factor.iter().product();
    let mut index = Vec::with_capacity(grid_out.iter().product::<usize>() * children);
    let mut merged = Vec::new();
    for g in row_major(grid_out) {
        let mut acc = [0.0; 3];
        let mut real = 0;
        for c in row_major(factor) {
            let p = [0, 1, 2].map(|a| g[a] * factor[a] + c[a]);
            if (0..3).all(|a| p[a] < grid[a]) {
                let t = flat(p, grid);
                index.push(t as u32);
                for a in 0..3 {
                    acc[a] += centroids[t][a];
                }
                real += 1;
            } else {
                index.push(GATHER_ZERO);
            }
        }
        merged.push(acc.map(|v| v / real as f64));
    }
    Ok(MergePlan {
        grid_in: grid,
        grid_out,
        factor,
        index: index.into(),
        children,
        centroids: merged,
    })
}

/// Concatenate each new token's children: `[B, L, C]` to `[B, L', m · C]`.
pub fn merge_gather<'t, E: Element>(tokens: Var<'t, E>, plan: &MergePlan) -> Result<Var<'t, E>> {
    let s = tokens.shape();
    let l_out: usize = plan.grid_out.iter().product();
    Ok(tokens
        .gather(1, plan.index.clone())?
        .reshape(&[s[0], l_out, plan.children * s[2]])?)
}
