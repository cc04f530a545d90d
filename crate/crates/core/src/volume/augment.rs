use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticConfig {
    /// Coarse displacement grid spacing (voxels).
    pub grid_spacing: f64,
    /// Gaussian smoothing width (voxels).
    pub smooth_sigma: f64,
    /// Displacement scale (voxels).
    pub magnitude_alpha: f64,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        ElasticConfig {
            grid_spacing: 10.0,
            smooth_sigma: 10.0,
            magnitude_alpha: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub max_rotation_degrees: f64,
    pub elastic: ElasticConfig,
    pub flip: bool,
    pub rotate: bool,
    pub deform: bool,
}

impl Default for AugmentConfig {
    /// Flips with p = 0.5, rotations within ±15°, elastic grid 10 / σ 10 / α 1.
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            max_rotation_degrees: 15.0,
            elastic: ElasticConfig::default(),
            flip: true,
            rotate: true,
            deform: true,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            flip: false,
            rotate: false,
            deform: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(invalid(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.max_rotation_degrees >= 0.0) {
            return Err(invalid("rotation range must be non-negative"));
        }
        let e = &self.elastic;
        if !(e.grid_spacing > 0.0) || !(e.smooth_sigma > 0.0) || !(e.magnitude_alpha >= 0.0) {
            return Err(invalid(format!("elastic parameters {e:?} out of range")));
        }
        Ok(())
    }
}

/// One draw of the rigid transform: per-axis flips, then Euler rotations
/// (degrees) about axes 0, 1 and 2 through the volume center.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RigidParams {
    pub flips: [bool; 3],
    pub angles_deg: [f64; 3],
}

/// Flips act on the in-slice axes (vertical = axis 1, horizontal = axis 2);
/// each rotation angle is uniform in ±max.
pub fn sample_rigid(cfg: &AugmentConfig, rng: &mut impl Rng) -> RigidParams {
    let mut p = RigidParams::default();
    if cfg.flip {
        p.flips[1] = rng.random::<f64>() < cfg.flip_prob;
        p.flips[2] = rng.random::<f64>() < cfg.flip_prob;
    }
    if cfg.rotate && cfg.max_rotation_degrees > 0.0 {
        let m = cfg.max_rotation_degrees;
        for a in &mut p.angles_deg {
            *a = rng.random_range(-m..=m);
        }
    }
    p
}

fn flip(v: &Volume, axis: usize) -> Volume {
    let d = v.dims();
    let mut data = Vec::with_capacity(v.len());
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let mut s = [z, y, x];
                s[axis] = d[axis] - 1 - s[axis];
                data.push(v.get(s[0], s[1], s[2]));
            }
        }
    }
    Volume::new(d, v.spacing(), data).expect("flip keeps a valid volume")
}

type Mat3 = [[f64; 3]; 3];

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Rotation by `deg` about `axis`, acting on the other two coordinates.
fn axis_rotation(axis: usize, deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    let (i, j) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut m = [[0.0; 3]; 3];
    m[axis][axis] = 1.0;
    m[i][i] = c;
    m[i][j] = -s;
    m[j][i] = s;
    m[j][j] = c;
    m
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn rotate(v: &Volume, angles_deg: [f64; 3]) -> Volume {
    let r = matmul3(
        &axis_rotation(2, angles_deg[2]),
        &matmul3(&axis_rotation(1, angles_deg[1]), &axis_rotation(0, angles_deg[0])),
    );
    let d = v.dims();
    let c = [0, 1, 2].map(|a| (d[a] - 1) as f64 / 2.0);
    let mut data = Vec::with_capacity(v.len());
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let q = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
                // inverse rotation (transpose) maps output back to source
                let src = [0, 1, 2].map(|a| snap((0..3).map(|k| r[k][a] * q[k]).sum::<f64>() + c[a]));
                data.push(v.sample_zero(src) as f32);
            }
        }
    }
    Volume::new(d, v.spacing(), data).expect("rotation keeps a valid volume")
}

/// Flips are exact axis reversals; rotations resample trilinearly about the
/// center with zero fill. Any angle is accepted here.
pub fn apply_rigid(v: &Volume, p: &RigidParams) -> Volume {
    let mut out = v.clone();
    for axis in 0..3 {
        if p.flips[axis] {
            out = flip(&out, axis);
        }
    }
    if p.angles_deg.iter().any(|&a| a != 0.0) {
        out = rotate(&out, p.angles_deg);
    }
    out
}

pub fn rigid_augment(v: &Volume, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Volume> {
    cfg.validate()?;
    Ok(apply_rigid(v, &sample_rigid(cfg, rng)))
}

/// Separable Gaussian smoothing of a scalar field, truncated at 3σ, with
/// the field extended by zeros beyond its edges. Kernel weights sum to 1
/// over the full support, so `|out| ≤ max |in|` everywhere.
pub fn gaussian_smooth(field: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|o| (-(o * o) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let mut cur = field.to_vec();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis] as i64;
        let mut next = vec![0.0; cur.len()];
        for (flat, out) in next.iter_mut().enumerate() {
            let pos = ((flat / strides[axis]) % dims[axis]) as i64;
            let base = flat - pos as usize * strides[axis];
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let q = pos + k as i64 - radius;
                if q >= 0 && q < n {
                    acc += w * cur[base + q as usize * strides[axis]];
                }
            }
            *out = acc / total;
        }
        cur = next;
    }
    cur
}

/// Coarse displacement field of an elastic warp, one component per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ElasticField {
    pub coarse_dims: [usize; 3],
    pub grid_spacing: f64,
    /// Raw standard-normal samples at the coarse nodes.
    pub raw: [Vec<f64>; 3],
    /// Smoothed and α-scaled samples at the coarse nodes.
    pub displacement: [Vec<f64>; 3],
}

impl ElasticField {
    /// Displacement at voxel `p`, trilinear between coarse nodes placed every
    /// `grid_spacing` voxels.
    pub fn at(&self, p: [f64; 3]) -> [f64; 3] {
        let q = p.map(|c| c / self.grid_spacing);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let v = Volume::new(
                self.coarse_dims,
                [1.0; 3],
                self.displacement[c].iter().map(|&x| x as f32).collect(),
            );
            *o = v.map_or(0.0, |v| v.sample_clamped(q));
        }
        out
    }

    fn upsample(&self, dims: [usize; 3]) -> [Vec<f64>; 3] {
        let vols: Vec<Volume> = (0..3)
            .map(|c| {
                Volume::new(
                    self.coarse_dims,
                    [1.0; 3],
                    self.displacement[c].iter().map(|&x| x as f32).collect(),
                )
                .expect("finite field")
            })
            .collect();
        let mut out = [Vec::new(), Vec::new(), Vec::new()];
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let q = [z, y, x].map(|c| c as f64 / self.grid_spacing);
                    for c in 0..3 {
                        out[c].push(vols[c].sample_clamped(q));
                    }
                }
            }
        }
        out
    }
}

pub fn elastic_field(dims: [usize; 3], cfg: &ElasticConfig, rng: &mut impl Rng) -> ElasticField {
    let g = cfg.grid_spacing;
    let coarse_dims = dims.map(|d| ((d - 1) as f64 / g).ceil() as usize + 1);
    let n: usize = coarse_dims.iter().product();
    let raw: [Vec<f64>; 3] = std::array::from_fn(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect());
    let displacement = std::array::from_fn(|c| {
        gaussian_smooth(&raw[c], coarse_dims, cfg.smooth_sigma / g)
            .into_iter()
            .map(|d| d * cfg.magnitude_alpha)
            .collect()
    });
    ElasticField {
        coarse_dims,
        grid_spacing: g,
        raw,
        displacement,
    }
}

/// Random smooth warp: `out(p) = v(p + d(p))`, sampled trilinearly with edge
/// clamping.
pub fn elastic_deform(v: &Volume, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Volume> {
    cfg.validate()?;
    let field = elastic_field(v.dims(), &cfg.elastic, rng);
    if cfg.elastic.magnitude_alpha == 0.0 {
        return Ok(v.clone());
    }
    let d = v.dims();
    let disp = field.upsample(d);
    let mut data = Vec::with_capacity(v.len());
    let mut i = 0;
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let p = [z as f64 + disp[0][i], y as f64 + disp[1][i], x as f64 + disp[2][i]];
                data.push(v.sample_clamped(p) as f32);
                i += 1;
            }
        }
    }
    Volume::new(d, v.spacing(), data)
}

/// Enabled transforms in order: flips, rotation, elastic warp.
pub fn augment(v: &Volume, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Volume> {
    cfg.validate()?;
    let mut out = if cfg.flip || cfg.rotate {
        apply_rigid(v, &sample_rigid(cfg, rng))
    } else {
        v.clone()
    };
    if cfg.deform {
        out = elastic_deform(&out, cfg, rng)?;
    }
    Ok(out)
}
