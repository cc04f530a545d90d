//! Raw slice kernels shared by the forward and backward passes.
//!
//! Everything here runs sequentially with a fixed loop order so results are
//! bit-reproducible.

use crate::element::Element;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// With `ta`, `a` is stored `k × m`; with `tb`, `b` is stored `n × k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<E: Element>(
    a: &[E],
    b: &[E],
    c: &mut [E],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.iter_mut().for_each(|v| *v = E::zero());
    }
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                let arow = &a[i * k..(i + 1) * k];
                for (p, &aip) in arow.iter().enumerate() {
                    if aip == E::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv = *cv + aip * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = E::zero();
                    for (&x, &y) in arow.iter().zip(brow) {
                        acc = acc + x * y;
                    }
                    c[i * n + j] = c[i * n + j] + acc;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let arow = &a[p * m..(p + 1) * m];
                let brow = &b[p * n..(p + 1) * n];
                for (i, &api) in arow.iter().enumerate() {
                    if api == E::zero() {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv = *cv + api * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = E::zero();
                    for p in 0..k {
                        acc = acc + a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] = c[i * n + j] + acc;
                }
            }
        }
    }
}

/// Geometry of a 3D convolution or pooling window over an `N×C×D×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window3 {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Window3 {
    pub fn output(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = self.input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    /// Input coordinate for output `o` and kernel offset `k` along `axis`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[axis] + k) as isize - self.padding[axis] as isize;
        if pos < 0 || pos as usize >= self.input[axis] {
            None
        } else {
            Some(pos as usize)
        }
    }
}

/// Unfold one sample `[C, D, H, W]` into columns `[C·kd·kh·kw, Do·Ho·Wo]`.
pub fn im2col<E: Element>(x: &[E], channels: usize, win: &Window3, out: [usize; 3], col: &mut [E]) {
    let plane = out[0] * out[1] * out[2];
    let in_len = win.input_len();
    let [kd, kh, kw] = win.kernel;
    debug_assert_eq!(col.len(), channels * win.kernel_len() * plane);
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * in_len..(c + 1) * in_len];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    let mut idx = 0;
                    for od in 0..out[0] {
                        let sd = win.source(0, od, a);
                        for oh in 0..out[1] {
                            let sh = win.source(1, oh, b);
                            for ow in 0..out[2] {
                                dst[idx] = match (sd, sh, win.source(2, ow, e)) {
                                    (Some(d), Some(h), Some(w)) => {
                                        xc[(d * win.input[1] + h) * win.input[2] + w]
                                    }
                                    _ => E::zero(),
                                };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[C, D, H, W]`.
pub fn col2im<E: Element>(col: &[E], channels: usize, win: &Window3, out: [usize; 3], dx: &mut [E]) {
    let plane = out[0] * out[1] * out[2];
    let in_len = win.input_len();
    let [kd, kh, kw] = win.kernel;
    let mut row = 0;
    for c in 0..channels {
        let dxc = &mut dx[c * in_len..(c + 1) * in_len];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &col[row * plane..(row + 1) * plane];
                    let mut idx = 0;
                    for od in 0..out[0] {
                        let sd = win.source(0, od, a);
                        for oh in 0..out[1] {
                            let sh = win.source(1, oh, b);
                            for ow in 0..out[2] {
                                if let (Some(d), Some(h), Some(w)) = (sd, sh, win.source(2, ow, e)) {
                                    let t = (d * win.input[1] + h) * win.input[2] + w;
                                    dxc[t] = dxc[t] + src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward convolution over a batch. `x` is `[N, C, D, H, W]`, `w` is
/// `[O, C, kd, kh, kw]`; returns `[N, O, Do, Ho, Wo]` data.
pub fn conv3d_forward<E: Element>(
    x: &[E],
    w: &[E],
    bias: Option<&[E]>,
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    win: &Window3,
    out: [usize; 3],
) -> Vec<E> {
    let plane = out[0] * out[1] * out[2];
    let ck = in_ch * win.kernel_len();
    let in_len = in_ch * win.input_len();
    let mut col = vec![E::zero(); ck * plane];
    let mut y = vec![E::zero(); batch * out_ch * plane];
    for n in 0..batch {
        im2col(&x[n * in_len..(n + 1) * in_len], in_ch, win, out, &mut col);
        let yn = &mut y[n * out_ch * plane..(n + 1) * out_ch * plane];
        gemm(w, &col, yn, out_ch, ck, plane, false, false, false);
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                yn[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = *v + bo);
            }
        }
    }
    y
}

/// Gradients of [`conv3d_forward`] with respect to input, kernel and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<E: Element>(
    x: &[E],
    w: &[E],
    dy: &[E],
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    win: &Window3,
    out: [usize; 3],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>, Vec<E>) {
    let plane = out[0] * out[1] * out[2];
    let ck = in_ch * win.kernel_len();
    let in_len = in_ch * win.input_len();
    let mut col = vec![E::zero(); ck * plane];
    let mut dx = want_dx.then(|| vec![E::zero(); batch * in_len]);
    let mut dw = want_dw.then(|| vec![E::zero(); out_ch * ck]);
    let mut db = vec![E::zero(); out_ch];
    for n in 0..batch {
        let dyn_ = &dy[n * out_ch * plane..(n + 1) * out_ch * plane];
        for o in 0..out_ch {
            db[o] = db[o] + dyn_[o * plane..(o + 1) * plane].iter().copied().sum::<E>();
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x[n * in_len..(n + 1) * in_len], in_ch, win, out, &mut col);
            gemm(dyn_, &col, dw, out_ch, plane, ck, false, true, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(w, dyn_, &mut col, ck, out_ch, plane, true, false, false);
            col2im(&col, in_ch, win, out, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Pooling over `[N·C]` planes of shape `win.input`. For max pooling the
/// flat argmax within each plane is returned alongside the values.
pub fn pool3d_forward<E: Element>(
    x: &[E],
    planes: usize,
    kind: PoolKind,
    win: &Window3,
    out: [usize; 3],
) -> (Vec<E>, Vec<u32>) {
    let in_len = win.input_len();
    let plane = out[0] * out[1] * out[2];
    let mut y = Vec::with_capacity(planes * plane);
    let mut arg = Vec::new();
    if kind == PoolKind::Max {
        arg.reserve(planes * plane);
    }
    for p in 0..planes {
        let xp = &x[p * in_len..(p + 1) * in_len];
        for od in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let mut best = E::neg_infinity();
                    let mut best_at = u32::MAX;
                    let mut acc = E::zero();
                    let mut count = 0usize;
                    for a in 0..win.kernel[0] {
                        let Some(d) = win.source(0, od, a) else { continue };
                        for b in 0..win.kernel[1] {
                            let Some(h) = win.source(1, oh, b) else { continue };
                            for e in 0..win.kernel[2] {
                                let Some(w) = win.source(2, ow, e) else { continue };
                                let t = (d * win.input[1] + h) * win.input[2] + w;
                                let v = xp[t];
                                if v > best {
                                    best = v;
                                    best_at = t as u32;
                                }
                                acc = acc + v;
                                count += 1;
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            y.push(best);
                            arg.push(best_at);
                        }
                        PoolKind::Avg => y.push(acc / E::from_usize(count.max(1))),
                    }
                }
            }
        }
    }
    (y, arg)
}

pub fn pool3d_backward<E: Element>(
    dy: &[E],
    planes: usize,
    kind: PoolKind,
    win: &Window3,
    out: [usize; 3],
    argmax: &[u32],
) -> Vec<E> {
    let in_len = win.input_len();
    let plane = out[0] * out[1] * out[2];
    let mut dx = vec![E::zero(); planes * in_len];
    for p in 0..planes {
        let dxp = &mut dx[p * in_len..(p + 1) * in_len];
        let dyp = &dy[p * plane..(p + 1) * plane];
        match kind {
            PoolKind::Max => {
                for (i, &g) in dyp.iter().enumerate() {
                    let t = argmax[p * plane + i];
                    if t != u32::MAX {
                        dxp[t as usize] = dxp[t as usize] + g;
                    }
                }
            }
            PoolKind::Avg => {
                let mut i = 0;
                for od in 0..out[0] {
                    for oh in 0..out[1] {
                        for ow in 0..out[2] {
                            let mut taps = Vec::with_capacity(win.kernel_len());
                            for a in 0..win.kernel[0] {
                                let Some(d) = win.source(0, od, a) else { continue };
                                for b in 0..win.kernel[1] {
                                    let Some(h) = win.source(1, oh, b) else { continue };
                                    for e in 0..win.kernel[2] {
                                        let Some(w) = win.source(2, ow, e) else { continue };
                                        taps.push((d * win.input[1] + h) * win.input[2] + w);
                                    }
                                }
                            }
                            let share = dyp[i] / E::from_usize(taps.len().max(1));
                            for t in taps {
                                dxp[t] = dxp[t] + share;
                            }
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    dx
}
