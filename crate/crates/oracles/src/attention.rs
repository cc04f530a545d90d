//! Self-attention written out per query.

/// `x · W + b` for a row vector, `W` row-major `[in, out]`.
pub fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, out: usize) -> Vec<f64> {
    let mut y: Vec<f64> = b.map_or(vec![0.0; out], <[f64]>::to_vec);
    for (i, &xi) in x.iter().enumerate() {
        for o in 0..out {
            y[o] += xi * w[i * out + o];
        }
    }
    y
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// `softmax(q kᵀ / √d) v` for one head; returns outputs and weights.
pub fn single_head(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = q[0].len() as f64;
    let mut outs = Vec::new();
    let mut weights = Vec::new();
    for qi in q {
        let scores: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let w = softmax(&scores);
        let mut o = vec![0.0; v[0].len()];
        for (wj, vj) in w.iter().zip(v) {
            for (oc, vc) in o.iter_mut().zip(vj) {
                *oc += wj * vc;
            }
        }
        outs.push(o);
        weights.push(w);
    }
    (outs, weights)
}

/// Parameters of one multi-head attention layer, row-major `[in, out]`.
pub struct MhaParams<'a> {
    pub qkv_w: &'a [f64],
    pub qkv_b: &'a [f64],
    pub proj_w: &'a [f64],
    pub proj_b: &'a [f64],
    pub heads: usize,
}

/// Multi-head attention where query `i` sees only keys with
/// `allowed(i, j)`, and `bias(h, i, j)` is added to each score.
pub fn multi_head(
    x: &[Vec<f64>],
    p: &MhaParams,
    allowed: &dyn Fn(usize, usize) -> bool,
    bias: &dyn Fn(usize, usize, usize) -> f64,
) -> Vec<Vec<f64>> {
    let d = x[0].len();
    let dh = d / p.heads;
    let qkv: Vec<Vec<f64>> = x.iter().map(|t| affine(t, p.qkv_w, Some(p.qkv_b), 3 * d)).collect();
    let mut concat = vec![vec![0.0; d]; x.len()];
    for h in 0..p.heads {
        let part = |t: usize, which: usize| qkv[t][which * d + h * dh..which * d + (h + 1) * dh].to_vec();
        for i in 0..x.len() {
            let keys: Vec<usize> = (0..x.len()).filter(|&j| allowed(i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    let (q, k) = (part(i, 0), part(j, 1));
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt() + bias(h, i, j)
                })
                .collect();
            let w = softmax(&scores);
            for (wj, &j) in w.iter().zip(&keys) {
                let v = part(j, 2);
                for c in 0..dh {
                    concat[i][h * dh + c] += wj * v[c];
                }
            }
        }
    }
    concat.iter().map(|c| affine(c, p.proj_w, Some(p.proj_b), d)).collect()
}

/// Token coordinates of a row-major grid.
pub fn coords(grid: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for z in 0..grid[0] {
        for y in 0..grid[1] {
            for x in 0..grid[2] {
                out.push([z, y, x]);
            }
        }
    }
    out
}

/// Shifted-window neighbourhood test: after rolling the grid back by
/// `shift`, two tokens interact when they fall in the same window and, on
/// every axis, either both or neither wrapped around the edge.
pub fn swin_neighbours(grid: [usize; 3], window: [usize; 3], shift: [usize; 3], a: [usize; 3], b: [usize; 3]) -> bool {
    (0..3).all(|k| {
        let roll = |p: usize| (p + grid[k] - shift[k]) % grid[k];
        let wrapped = |p: usize| p < shift[k];
        roll(a[k]) / window[k] == roll(b[k]) / window[k] && wrapped(a[k]) == wrapped(b[k])
    })
}

/// Position of a token inside its shifted window.
pub fn swin_local(grid: [usize; 3], window: [usize; 3], shift: [usize; 3], p: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|k| ((p[k] + grid[k] - shift[k]) % grid[k]) % window[k])
}
