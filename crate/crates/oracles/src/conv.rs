/// Direct convolution: `x` is `[n, c, d, h, w]`, `k` is `[o, c, kd, kh, kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d(
    x: &[f64],
    xs: [usize; 5],
    k: &[f64],
    ks: [usize; 5],
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [n, c, d, h, w] = xs;
    let [o, _, kd, kh, kw] = ks;
    let od = (d + 2 * pad[0] - kd) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (w + 2 * pad[2] - kw) / stride[2] + 1;
    let mut y = vec![0.0; n * o * od * oh * ow];
    let at = |b: usize, ch: usize, z: isize, yy: isize, xx: isize| -> f64 {
        if z < 0 || yy < 0 || xx < 0 || z >= d as isize || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            x[(((b * c + ch) * d + z as usize) * h + yy as usize) * w + xx as usize]
        }
    };
    for b in 0..n {
        for f in 0..o {
            for i in 0..od {
                for j in 0..oh {
                    for l in 0..ow {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for a in 0..kd {
                                for e in 0..kh {
                                    for g in 0..kw {
                                        let z = (i * stride[0] + a) as isize - pad[0] as isize;
                                        let yy = (j * stride[1] + e) as isize - pad[1] as isize;
                                        let xx = (l * stride[2] + g) as isize - pad[2] as isize;
                                        acc += at(b, ch, z, yy, xx)
                                            * k[(((f * c + ch) * kd + a) * kh + e) * kw + g];
                                    }
                                }
                            }
                        }
                        y[(((b * o + f) * od + i) * oh + j) * ow + l] = acc;
                    }
                }
            }
        }
    }
    (y, [n, o, od, oh, ow])
}

/// Direct max or average pooling without padding.
pub fn pool3d(x: &[f64], xs: [usize; 5], window: [usize; 3], stride: [usize; 3], max: bool) -> Vec<f64> {
    let [n, c, d, h, w] = xs;
    let od = (d - window[0]) / stride[0] + 1;
    let oh = (h - window[1]) / stride[1] + 1;
    let ow = (w - window[2]) / stride[2] + 1;
    let mut y = Vec::new();
    for p in 0..n * c {
        for i in 0..od {
            for j in 0..oh {
                for l in 0..ow {
                    let mut vals = Vec::new();
                    for a in 0..window[0] {
                        for e in 0..window[1] {
                            for g in 0..window[2] {
                                let z = i * stride[0] + a;
                                let yy = j * stride[1] + e;
                                let xx = l * stride[2] + g;
                                vals.push(x[((p * d + z) * h + yy) * w + xx]);
                            }
                        }
                    }
                    y.push(if max {
                        vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    });
                }
            }
        }
    }
    y
}
