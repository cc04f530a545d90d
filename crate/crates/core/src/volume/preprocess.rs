use super::Volume;
use crate::error::{invalid, Error, Result};

/// Isotropic spacing used for 3D inputs (143 µm).
pub const FULL_SPACING_MM: f64 = 0.143;

/// Fixed 3D input shape after resampling and crop-or-pad.
pub const FULL_SHAPE: [usize; 3] = [112, 112, 80];

/// Native voxel spacing (mm) of a 24 × 1800 × 1024 radial stack that
/// resamples to 252 × 112 × 49 at [`FULL_SPACING_MM`].
pub const FULL_NATIVE_SPACING: [f64; 3] = [
    FULL_SPACING_MM * 252.0 / 24.0,
    FULL_SPACING_MM * 112.0 / 1800.0,
    FULL_SPACING_MM * 49.0 / 1024.0,
];

/// Resample to `target_spacing` (mm per axis). Output dims are
/// `round(dim · spacing / target)` (at least 1); output voxel `j` sits at
/// physical offset `j · target` from the first voxel and reads the input
/// trilinearly, clamped at the edges.
pub fn resample_trilinear(v: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(invalid(format!("target spacing {target_spacing:?} must be positive")));
    }
    let src = v.dims();
    let sp = v.spacing();
    let mut out_dims = [0usize; 3];
    let mut step = [0.0; 3];
    for a in 0..3 {
        out_dims[a] = ((src[a] as f64 * sp[a] / target_spacing[a]).round() as usize).max(1);
        step[a] = target_spacing[a] / sp[a];
    }
    if out_dims == src && step == [1.0; 3] {
        return Ok(v.clone());
    }
    // per-axis source taps are shared across the other two axes
    let taps = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..out_dims[a])
            .map(|j| {
                let c = (j as f64 * step[a]).clamp(0.0, (src[a] - 1) as f64);
                let lo = c.floor() as usize;
                (lo, (lo + 1).min(src[a] - 1), c - lo as f64)
            })
            .collect()
    };
    let (tz, ty, tx) = (taps(0), taps(1), taps(2));
    let mut data = Vec::with_capacity(out_dims.iter().product());
    let g = |z: usize, y: usize, x: usize| f64::from(v.get(z, y, x));
    for &(z0, z1, fz) in &tz {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let c00 = g(z0, y0, x0) * (1.0 - fx) + g(z0, y0, x1) * fx;
                let c01 = g(z0, y1, x0) * (1.0 - fx) + g(z0, y1, x1) * fx;
                let c10 = g(z1, y0, x0) * (1.0 - fx) + g(z1, y0, x1) * fx;
                let c11 = g(z1, y1, x0) * (1.0 - fx) + g(z1, y1, x1) * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                data.push((c0 * (1.0 - fz) + c1 * fz) as f32);
            }
        }
    }
    Volume::new(out_dims, target_spacing, data)
}

/// Centered crop where the target is smaller, symmetric zero padding where
/// it is larger. The retained / placed block starts at
/// `floor(|src − tgt| / 2)` on each axis.
pub fn crop_or_pad(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.iter().any(|&t| t == 0) {
        return Err(invalid(format!("target shape {target:?} must be positive")));
    }
    let src = v.dims();
    // for each output index, the source index if any
    let map = |a: usize| -> Vec<Option<usize>> {
        (0..target[a])
            .map(|i| {
                if target[a] <= src[a] {
                    Some(i + (src[a] - target[a]) / 2)
                } else {
                    let before = (target[a] - src[a]) / 2;
                    (i >= before && i - before < src[a]).then(|| i - before)
                }
            })
            .collect()
    };
    let (mz, my, mx) = (map(0), map(1), map(2));
    let mut data = Vec::with_capacity(target.iter().product());
    for z in &mz {
        for y in &my {
            for x in &mx {
                data.push(match (z, y, x) {
                    (Some(z), Some(y), Some(x)) => v.get(*z, *y, *x),
                    _ => 0.0,
                });
            }
        }
    }
    Volume::new(target, v.spacing(), data)
}

/// Instance z-score: subtract the mean, divide by the population SD.
pub fn zscore_normalize(v: &Volume) -> Result<Volume> {
    let mean = v.mean();
    let sd = v.std();
    if !(sd > 1e-8) {
        return Err(Error::Degenerate(format!("volume standard deviation {sd:e} is below 1e-8")));
    }
    let data = v.data().iter().map(|&x| ((f64::from(x) - mean) / sd) as f32).collect();
    Volume::new(v.dims(), v.spacing(), data)
}

/// Resample to the isotropic 143 µm grid, then crop or pad to 112 × 112 × 80.
pub fn full_preprocess(v: &Volume) -> Result<Volume> {
    crop_or_pad(&resample_trilinear(v, [FULL_SPACING_MM; 3])?, FULL_SHAPE)
}

/// Single-channel 2D image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Slice index of a radial B-scan at `degrees`, with slice 0 at 0° and the
/// slices spread evenly over 360°.
pub fn angle_to_slice(degrees: f64, n_slices: usize) -> Result<usize> {
    if n_slices == 0 {
        return Err(invalid("no slices"));
    }
    let step = 360.0 / n_slices as f64;
    Ok(((degrees.rem_euclid(360.0) / step).round() as usize) % n_slices)
}

/// One slice, bilinearly resized with corner-aligned sampling so a target
/// equal to the slice size copies it unchanged.
pub fn extract_bscan(v: &Volume, slice_index: usize, target_hw: [usize; 2]) -> Result<Image> {
    let [d, h, w] = v.dims();
    if slice_index >= d {
        return Err(invalid(format!("slice {slice_index} out of range for {d} slices")));
    }
    if target_hw.iter().any(|&t| t == 0) {
        return Err(invalid(format!("target size {target_hw:?} must be positive")));
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> f64 {
        if n_out == 1 {
            (n_in - 1) as f64 / 2.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let z = slice_index as f64;
    let mut data = Vec::with_capacity(target_hw[0] * target_hw[1]);
    for i in 0..target_hw[0] {
        for j in 0..target_hw[1] {
            let p = [z, coord(i, target_hw[0], h), coord(j, target_hw[1], w)];
            data.push(v.sample_clamped(p) as f32);
        }
    }
    Ok(Image {
        height: target_hw[0],
        width: target_hw[1],
        data,
    })
}
