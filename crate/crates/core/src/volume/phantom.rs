//! Synthetic "cornea" volumes with a controllable sparse anomaly.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::augment::gaussian_smooth;
use super::Volume;
use crate::error::{invalid, Error, Result};
use crate::labels::{CohortRecord, GmmModel};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub anomaly_amplitude: f64,
    /// Fraction of voxels carrying the anomaly.
    pub anomaly_sparsity: f64,
    pub noise_sigma: f64,
    pub label_gmm: GmmModel,
    pub seed: u64,
    /// Amplitude whose perturbation energy maps onto the full KC offset.
    #[serde(default = "one")]
    pub reference_amplitude: f64,
    /// Smoothing width (voxels) of the random field that selects the support.
    #[serde(default = "support_sigma")]
    pub support_sigma: f64,
}

fn one() -> f64 {
    1.0
}

fn support_sigma() -> f64 {
    1.5
}

impl PhantomSpec {
    pub fn new(shape: [usize; 3], amplitude: f64, sparsity: f64, noise_sigma: f64, seed: u64) -> Self {
        PhantomSpec {
            shape,
            anomaly_amplitude: amplitude,
            anomaly_sparsity: sparsity,
            noise_sigma,
            label_gmm: GmmModel::phantom_default(),
            seed,
            reference_amplitude: 1.0,
            support_sigma: support_sigma(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d == 0) {
            return Err(invalid(format!("phantom shape {:?} must be positive", self.shape)));
        }
        if !(self.anomaly_amplitude >= 0.0) || !self.anomaly_amplitude.is_finite() {
            return Err(invalid("anomaly amplitude must be a finite value ≥ 0"));
        }
        if !(self.anomaly_sparsity > 0.0 && self.anomaly_sparsity <= 1.0) {
            return Err(invalid(format!("sparsity {} outside (0, 1]", self.anomaly_sparsity)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.reference_amplitude > 0.0) || !(self.support_sigma > 0.0) {
            return Err(invalid("noise, reference amplitude and support sigma must be positive"));
        }
        self.label_gmm.validate()?;
        if self.label_gmm.dim() != 2 {
            return Err(Error::Dimension(format!(
                "phantom index vectors are 2-D, mixture has dimension {}",
                self.label_gmm.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    /// Index vector: (mean perturbation energy, support spread) mapped onto
    /// the segment between the two mixture means.
    pub x: Vec<f64>,
    pub p_kc: f64,
    /// Voxels carrying the anomaly, flat indices in ascending order.
    pub support: Vec<usize>,
}

fn background(dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims.map(|v| v as f64);
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let rz = (z as f64 - (d - 1.0) / 2.0) / d.max(2.0);
                let rx = (x as f64 - (w - 1.0) / 2.0) / w.max(2.0);
                // dome-shaped anterior surface, deeper toward the periphery
                let surface = 0.25 * h + 0.8 * h * (rz * rz + rx * rx);
                let depth = y as f64 - surface;
                let epithelium = (-(depth / (0.03 * h + 0.5)).powi(2)).exp();
                let stroma = 0.6 * (-((depth - 0.12 * h) / (0.08 * h + 0.5)).powi(2)).exp();
                out.push(epithelium + stroma);
            }
        }
    }
    out
}

/// Layered smooth background, plus an amplitude-scaled perturbation on the
/// top `⌈sparsity · N⌉` voxels of a smoothed random field, plus Gaussian
/// noise. The perturbation is normalized so its mean energy over the
/// support equals `amplitude²`. The label index vector is
/// `μ₁ + (e · (μ₂ − μ₁)₀, s · (μ₂ − μ₁)₁)` with `e = (a / a_ref)²` and `s`
/// the RMS distance of support voxels from their centroid over the
/// half-diagonal (0 when the amplitude is 0).
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.shape;
    let n: usize = dims.iter().product();
    let mut rng = seeds::stream(spec.seed, "phantom", 0);

    let raw: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let field = gaussian_smooth(&raw, dims, spec.support_sigma);
    let k = ((spec.anomaly_sparsity * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut support = order[..k].to_vec();
    support.sort_unstable();

    let rms = (support.iter().map(|&i| field[i] * field[i]).sum::<f64>() / k as f64).sqrt();
    let mut values = background(dims);
    let a = spec.anomaly_amplitude;
    if a > 0.0 && rms > 0.0 {
        for &i in &support {
            values[i] += a * field[i] / rms;
        }
    }
    for v in &mut values {
        let e: f64 = rng.sample(StandardNormal);
        *v += spec.noise_sigma * e;
    }

    let coords = |i: usize| [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]].map(|c| c as f64);
    let mut centroid = [0.0; 3];
    for &i in &support {
        let c = coords(i);
        for a in 0..3 {
            centroid[a] += c[a] / k as f64;
        }
    }
    let msd = support
        .iter()
        .map(|&i| {
            let c = coords(i);
            (0..3).map(|a| (c[a] - centroid[a]).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        / k as f64;
    let half_diag = 0.5 * dims.iter().map(|&d| ((d - 1) as f64).powi(2)).sum::<f64>().sqrt();
    let spread = if a > 0.0 && half_diag > 0.0 { msd.sqrt() / half_diag } else { 0.0 };
    let energy = (a / spec.reference_amplitude).powi(2);

    let g = &spec.label_gmm;
    let x = vec![
        g.mu[0][0] + energy * (g.mu[1][0] - g.mu[0][0]),
        g.mu[0][1] + spread * (g.mu[1][1] - g.mu[0][1]),
    ];
    let p_kc = g.posteriors(&x)?[1];
    let volume = Volume::new(dims, [1.0; 3], values.into_iter().map(|v| v as f32).collect())?;
    Ok(Phantom {
        volume,
        x,
        p_kc,
        support,
    })
}

/// A labelled set of phantoms: two eyes per patient, amplitudes drawn
/// uniformly from `amplitude_range` per volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomCohortSpec {
    pub n: usize,
    pub shape: [usize; 3],
    pub amplitude_range: [f64; 2],
    pub sparsity: f64,
    pub noise_sigma: f64,
    pub label_gmm: GmmModel,
    pub seed: u64,
}

impl PhantomCohortSpec {
    /// 32³ volumes, amplitude U[0, 2], 20 % sparsity, noise 0.05.
    pub fn desk(n: usize, seed: u64) -> Self {
        PhantomCohortSpec {
            n,
            shape: [32, 32, 32],
            amplitude_range: [0.0, 2.0],
            sparsity: 0.2,
            noise_sigma: 0.05,
            label_gmm: GmmModel::phantom_default(),
            seed,
        }
    }

    /// Phantom `i`: its amplitude comes from the `data` stream and its
    /// voxels from the `phantom` stream, both indexed by `i`.
    pub fn member(&self, i: usize) -> Result<PhantomSpec> {
        let [lo, hi] = self.amplitude_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(invalid(format!("amplitude range {:?}", self.amplitude_range)));
        }
        let a = if hi > lo {
            seeds::stream(self.seed, "data", i as u64).random_range(lo..hi)
        } else {
            lo
        };
        Ok(PhantomSpec {
            label_gmm: self.label_gmm.clone(),
            ..PhantomSpec::new(
                self.shape,
                a,
                self.sparsity,
                self.noise_sigma,
                seeds::derive_seed(self.seed, "phantom", i as u64),
            )
        })
    }
}

/// Manifest row of cohort member `i`: patient `p{i/2}`, eye OD/OS,
/// volume `volumes/{i:04}.volb`.
pub fn cohort_record(i: usize, p_kc: f64) -> CohortRecord {
    CohortRecord {
        patient_id: format!("p{:04}", i / 2),
        eye_id: if i % 2 == 0 { "OD" } else { "OS" }.into(),
        volume_path: format!("volumes/{i:04}.volb"),
        p_kc,
        age: None,
        sex: None,
    }
}

/// Every member of the cohort with its manifest row.
pub fn generate_cohort(spec: &PhantomCohortSpec) -> Result<Vec<(CohortRecord, Phantom)>> {
    if spec.n == 0 {
        return Err(invalid("cohort needs at least one volume"));
    }
    (0..spec.n)
        .map(|i| {
            let ph = generate_phantom(&spec.member(i)?)?;
            Ok((cohort_record(i, ph.p_kc), ph))
        })
        .collect()
}
