//! Volumes, their file format, preprocessing, augmentation and phantoms.

mod augment;
mod io;
mod phantom;
mod preprocess;

pub use augment::{
    apply_rigid, augment, elastic_deform, elastic_field, gaussian_smooth, rigid_augment, sample_rigid, AugmentConfig,
    ElasticConfig, ElasticField, RigidParams,
};
pub use io::{read_volume, read_volume_from, write_volume, write_volume_to};
pub use phantom::{cohort_record, generate_cohort, generate_phantom, Phantom, PhantomCohortSpec, PhantomSpec};
pub use preprocess::{
    angle_to_slice, crop_or_pad, extract_bscan, full_preprocess, resample_trilinear, zscore_normalize, Image,
    FULL_NATIVE_SPACING, FULL_SHAPE, FULL_SPACING_MM,
};

use volab_tensor::{Element, Tensor};

use crate::error::{invalid, Result};

/// Dense scalar grid stored slice-major: index `(z * h + y) * w + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(invalid(format!("volume dims {dims:?} must be positive")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid(format!("spacing {spacing:?} must be positive")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(invalid(format!("{} values for dims {dims:?}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("volume contains non-finite values"));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; dims.iter().product()])
    }

    /// Volume with unit spacing filled from `f(z, y, x)`.
    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(dims, [1.0; 3], data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(invalid(format!("spacing {spacing:?} must be positive")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / self.len() as f64).sqrt()
    }

    /// Single-channel model input `[1, 1, D, H, W]`.
    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        let d = self.dims;
        let data = self.data.iter().map(|&v| E::from_f64(f64::from(v))).collect();
        Tensor::from_vec(&[1, 1, d[0], d[1], d[2]], data).expect("volume dims are positive")
    }

    /// Trilinear sample at fractional voxel coordinates. Coordinates are
    /// clamped to the grid.
    pub fn sample_clamped(&self, p: [f64; 3]) -> f64 {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let max = (self.dims[a] - 1) as f64;
            let c = p[a].clamp(0.0, max);
            let f = c.floor();
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(self.dims[a] - 1);
            t[a] = c - f;
        }
        self.blend(lo, hi, t, |z, y, x| f64::from(self.get(z, y, x)))
    }

    /// Trilinear sample where taps outside the grid read as zero.
    pub fn sample_zero(&self, p: [f64; 3]) -> f64 {
        let mut lo = [0i64; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let f = p[a].floor();
            lo[a] = f as i64;
            t[a] = p[a] - f;
        }
        let tap = |z: i64, y: i64, x: i64| -> f64 {
            let inside = |v: i64, a: usize| v >= 0 && (v as usize) < self.dims[a];
            if inside(z, 0) && inside(y, 1) && inside(x, 2) {
                f64::from(self.get(z as usize, y as usize, x as usize))
            } else {
                0.0
            }
        };
        let mut acc = 0.0;
        for (dz, wz) in [(0, 1.0 - t[0]), (1, t[0])] {
            for (dy, wy) in [(0, 1.0 - t[1]), (1, t[1])] {
                for (dx, wx) in [(0, 1.0 - t[2]), (1, t[2])] {
                    let w = wz * wy * wx;
                    if w != 0.0 {
                        acc += w * tap(lo[0] + dz, lo[1] + dy, lo[2] + dx);
                    }
                }
            }
        }
        acc
    }

    fn blend(&self, lo: [usize; 3], hi: [usize; 3], t: [f64; 3], v: impl Fn(usize, usize, usize) -> f64) -> f64 {
        let c00 = v(lo[0], lo[1], lo[2]) * (1.0 - t[2]) + v(lo[0], lo[1], hi[2]) * t[2];
        let c01 = v(lo[0], hi[1], lo[2]) * (1.0 - t[2]) + v(lo[0], hi[1], hi[2]) * t[2];
        let c10 = v(hi[0], lo[1], lo[2]) * (1.0 - t[2]) + v(hi[0], lo[1], hi[2]) * t[2];
        let c11 = v(hi[0], hi[1], lo[2]) * (1.0 - t[2]) + v(hi[0], hi[1], hi[2]) * t[2];
        let c0 = c00 * (1.0 - t[1]) + c01 * t[1];
        let c1 = c10 * (1.0 - t[1]) + c11 * t[1];
        c0 * (1.0 - t[0]) + c1 * t[0]
    }
}

/// Stack volumes into a batch `[N, 1, D, H, W]`; all must share dims.
pub fn batch_tensor<E: Element>(volumes: &[&Volume]) -> Result<Tensor<E>> {
    let first = volumes.first().ok_or_else(|| invalid("empty batch"))?;
    let d = first.dims();
    let mut data = Vec::with_capacity(volumes.len() * first.len());
    for v in volumes {
        if v.dims() != d {
            return Err(invalid(format!("batch mixes dims {d:?} and {:?}", v.dims())));
        }
        data.extend(v.data().iter().map(|&x| E::from_f64(f64::from(x))));
    }
    Ok(Tensor::from_vec(&[volumes.len(), 1, d[0], d[1], d[2]], data)?)
}
