//! Top-k attention distances and Swin token reachability, by exhaustion.

use crate::attention::{coords, swin_neighbours};

/// Distances from each query to its `k` most-attended targets in one
/// `L × L` attention matrix. Full sort by (weight desc, index asc); zero
/// weights and tokens without a centroid are never targets.
pub fn top_k_distances(att: &[f64], centroids: &[Option<[f64; 3]>], k: usize, include_self: bool) -> Vec<(f64, f64)> {
    let l = centroids.len();
    let mut out = Vec::new();
    for i in 0..l {
        let Some(ci) = centroids[i] else { continue };
        let mut targets: Vec<usize> = Vec::new();
        for j in 0..l {
            if att[i * l + j] > 0.0 && centroids[j].is_some() && (include_self || i != j) {
                targets.push(j);
            }
        }
        targets.sort_by(|&a, &b| att[i * l + b].partial_cmp(&att[i * l + a]).unwrap().then(a.cmp(&b)));
        for &j in targets.iter().take(k) {
            let cj = centroids[j].unwrap();
            let d = ((ci[0] - cj[0]).powi(2) + (ci[1] - cj[1]).powi(2) + (ci[2] - cj[2]).powi(2)).sqrt();
            out.push((d, att[i * l + j]));
        }
    }
    out
}

/// One Swin stage as seen by the reachability search.
#[derive(Clone, Copy, Debug)]
pub struct ReachStage {
    pub grid: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub depth: usize,
}

fn index(grid: [usize; 3], p: [usize; 3]) -> usize {
    (p[0] * grid[1] + p[1]) * grid[2] + p[2]
}

/// Largest per-axis input extent (voxels) that reaches one token at the end
/// of each stage, starting from the patch grid (entry 0) and walking
/// attention neighbourhoods (shift on odd blocks) and 2×-merges. Token sets
/// are explicit sets of first-grid patches.
pub fn swin_reach(input: [usize; 3], patch: [usize; 3], stages: &[ReachStage]) -> Vec<[usize; 3]> {
    let g0 = stages[0].grid;
    let n0 = g0[0] * g0[1] * g0[2];
    let mut grid = g0;
    let mut reach: Vec<Vec<bool>> = (0..n0).map(|t| (0..n0).map(|u| u == t).collect()).collect();
    let extent = |reach: &Vec<Vec<bool>>| -> [usize; 3] {
        let mut best = [0; 3];
        for set in reach {
            for a in 0..3 {
                let mut lo = usize::MAX;
                let mut hi = 0;
                for (u, p) in coords(g0).into_iter().enumerate() {
                    if set[u] {
                        lo = lo.min(p[a] * patch[a]);
                        hi = hi.max(((p[a] + 1) * patch[a]).min(input[a]) - 1);
                    }
                }
                best[a] = best[a].max(hi - lo + 1);
            }
        }
        best
    };
    let mut out = vec![extent(&reach)];
    for st in stages {
        if st.grid != grid {
            let mut merged = vec![vec![false; n0]; st.grid.iter().product()];
            for (t, p) in coords(grid).into_iter().enumerate() {
                let q = [0, 1, 2].map(|a| if st.grid[a] == grid[a] { p[a] } else { p[a] / 2 });
                let m = &mut merged[index(st.grid, q)];
                for u in 0..n0 {
                    m[u] |= reach[t][u];
                }
            }
            reach = merged;
            grid = st.grid;
        }
        let cs = coords(grid);
        for b in 0..st.depth {
            let shift = if b % 2 == 1 { st.shift } else { [0; 3] };
            let mut next = vec![vec![false; n0]; cs.len()];
            for (t, &pt) in cs.iter().enumerate() {
                for (v, &pv) in cs.iter().enumerate() {
                    if swin_neighbours(grid, st.window, shift, pt, pv) {
                        for u in 0..n0 {
                            next[t][u] |= reach[v][u];
                        }
                    }
                }
            }
            reach = next;
        }
        out.push(extent(&reach));
    }
    out
}
