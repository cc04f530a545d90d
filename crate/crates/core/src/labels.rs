//! Soft keratoconus-risk labels, risk bins and patient-grouped splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::seeds;

/// Two-component Gaussian mixture. Component 0 is Healthy, 1 is KC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub pi: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<Vec<f64>>>,
}

impl GmmModel {
    pub fn new(pi: [f64; 2], mu: [Vec<f64>; 2], sigma: [Vec<Vec<f64>>; 2]) -> Result<Self> {
        let m = GmmModel {
            pi: pi.to_vec(),
            mu: mu.to_vec(),
            sigma: sigma.to_vec(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Mixture used by the phantom generator: equal priors, healthy mode at
    /// the origin, KC mode at (1, 0.6), isotropic variance 0.25.
    pub fn phantom_default() -> Self {
        let cov = vec![vec![0.25, 0.0], vec![0.0, 0.25]];
        GmmModel {
            pi: vec![0.5, 0.5],
            mu: vec![vec![0.0, 0.0], vec![1.0, 0.6]],
            sigma: vec![cov.clone(), cov],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pi.len() != 2 || self.mu.len() != 2 || self.sigma.len() != 2 {
            return Err(invalid("a mixture needs exactly two components"));
        }
        let total = self.pi[0] + self.pi[1];
        if self.pi.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("priors {:?} must lie in [0,1] and sum to 1", self.pi)));
        }
        let k = self.dim();
        if k == 0 {
            return Err(invalid("empty mean vector"));
        }
        for c in 0..2 {
            if self.mu[c].len() != k {
                return Err(Error::Dimension(format!("mean {c} has length {}, expected {k}", self.mu[c].len())));
            }
            if self.sigma[c].len() != k || self.sigma[c].iter().any(|r| r.len() != k) {
                return Err(Error::Dimension(format!("covariance {c} must be {k}x{k}")));
            }
            cholesky(&self.sigma[c]).ok_or(Error::SingularCovariance(c))?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: GmmModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Posterior of each component at `x`; the two values share one
    /// normalizer and sum to exactly 1.
    pub fn posteriors(&self, x: &[f64]) -> Result<[f64; 2]> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!("index vector has {} entries, model expects {}", x.len(), self.dim())));
        }
        let mut logp = [f64::NEG_INFINITY; 2];
        for c in 0..2 {
            if self.pi[c] > 0.0 {
                logp[c] = self.pi[c].ln() + log_normal(x, &self.mu[c], &self.sigma[c]).ok_or(Error::SingularCovariance(c))?;
            }
        }
        if logp.iter().all(|l| *l == f64::NEG_INFINITY) {
            return Err(invalid("both priors are zero"));
        }
        // the smaller posterior is computed directly, the larger as its complement
        let (small, large) = if logp[0] <= logp[1] { (0, 1) } else { (1, 0) };
        let lse = logp[large] + (logp[small] - logp[large]).exp().ln_1p();
        let mut out = [0.0; 2];
        out[small] = (logp[small] - lse).exp();
        out[large] = 1.0 - out[small];
        Ok(out)
    }
}

/// Posterior probability of the KC component, evaluated in log space.
pub fn gmm_posterior(x: &[f64], model: &GmmModel) -> Result<f64> {
    Ok(model.posteriors(x)?[1])
}

/// Lower Cholesky factor, or `None` when the matrix is not positive definite.
pub(crate) fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                if (a[i][j] - a[j][i]).abs() > 1e-9 * (1.0 + a[i][j].abs()) {
                    return None;
                }
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn log_normal(x: &[f64], mu: &[f64], sigma: &[Vec<f64>]) -> Option<f64> {
    let l = cholesky(sigma)?;
    let k = x.len();
    // forward substitution: z = L⁻¹(x − μ)
    let mut z = vec![0.0; k];
    for i in 0..k {
        let s: f64 = (0..i).map(|j| l[i][j] * z[j]).sum();
        z[i] = (x[i] - mu[i] - s) / l[i][i];
    }
    let maha: f64 = z.iter().map(|v| v * v).sum();
    let log_det: f64 = 2.0 * (0..k).map(|i| l[i][i].ln()).sum::<f64>();
    Some(-0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + maha))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RiskBin {
    Healthy,
    Subclinical,
    Keratoconus,
}

impl RiskBin {
    pub const ALL: [RiskBin; 3] = [RiskBin::Healthy, RiskBin::Subclinical, RiskBin::Keratoconus];

    pub fn name(self) -> &'static str {
        match self {
            RiskBin::Healthy => "healthy",
            RiskBin::Subclinical => "subclinical",
            RiskBin::Keratoconus => "keratoconus",
        }
    }
}

impl fmt::Display for RiskBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Healthy for p ≤ 0.25, Keratoconus for p ≥ 0.75, Subclinical strictly between.
pub fn risk_bin(p: f64) -> Result<RiskBin> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("probability {p} outside [0, 1]")));
    }
    Ok(if p <= 0.25 {
        RiskBin::Healthy
    } else if p >= 0.75 {
        RiskBin::Keratoconus
    } else {
        RiskBin::Subclinical
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "M")]
    Male,
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub patient_id: String,
    pub eye_id: String,
    pub volume_path: String,
    pub p_kc: f64,
    pub age: Option<f64>,
    pub sex: Option<Sex>,
}

impl CohortRecord {
    pub fn key(&self) -> String {
        format!("{}/{}/{}", self.patient_id, self.eye_id, self.volume_path)
    }
}

pub fn validate_records(records: &[CohortRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !(0.0..=1.0).contains(&r.p_kc) {
            return Err(Error::Format(format!("p_kc {} of {} outside [0, 1]", r.p_kc, r.key())));
        }
        if r.patient_id.is_empty() {
            return Err(Error::Format(format!("record {} has no patient id", r.volume_path)));
        }
        if !seen.insert((&r.patient_id, &r.eye_id, &r.volume_path)) {
            return Err(Error::Format(format!("duplicate record {}", r.key())));
        }
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<CohortRecord>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let records = read_manifest_from(file)?;
    Ok(records)
}

pub fn read_manifest_from(reader: impl std::io::Read) -> Result<Vec<CohortRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let records = rdr.deserialize().collect::<std::result::Result<Vec<CohortRecord>, _>>()?;
    validate_records(&records)?;
    Ok(records)
}

pub fn write_manifest_to(writer: impl std::io::Write, records: &[CohortRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err("manifest"))?;
    Ok(())
}

pub fn write_manifest(path: &Path, records: &[CohortRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    write_manifest_to(file, records)
}

/// Equal-width bin of a probability over `n_bins` bins on [0, 1].
fn prob_bin(p: f64, n_bins: usize) -> usize {
    ((p * n_bins as f64).floor() as usize).min(n_bins - 1)
}

/// Fold index for every record. Patients are kept whole, stratified by the
/// bin of their mean p_kc: within each bin patients are shuffled and dealt
/// to the fold holding the fewest records of that bin (ties go to the fold
/// with the fewest records overall, then the lowest index), which is
/// largest-remainder allocation done one patient at a time.
pub fn stratified_patient_split(records: &[CohortRecord], n_bins: usize, n_folds: usize, seed: u64) -> Result<Vec<usize>> {
    if n_folds < 2 {
        return Err(invalid("need at least two folds"));
    }
    if n_bins == 0 {
        return Err(invalid("need at least one bin"));
    }
    let mut patients: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.patient_id.is_empty() {
            return Err(Error::Format(format!("record {} has no patient id", r.volume_path)));
        }
        patients.entry(&r.patient_id).or_default().push(i);
    }
    if patients.len() < n_folds {
        return Err(invalid(format!("{} patients cannot fill {n_folds} folds", patients.len())));
    }
    let mut by_bin: Vec<Vec<(&str, &Vec<usize>)>> = vec![Vec::new(); n_bins];
    for (pid, rows) in &patients {
        let mean = rows.iter().map(|&i| records[i].p_kc).sum::<f64>() / rows.len() as f64;
        by_bin[prob_bin(mean, n_bins)].push((pid, rows));
    }
    let mut rng = seeds::stream(seed, "split", 0);
    let mut fold_total = vec![0usize; n_folds];
    let mut assignment = vec![usize::MAX; records.len()];
    for group in &mut by_bin {
        group.shuffle(&mut rng);
        // larger patients first so single-scan patients can even out the tally
        group.sort_by_key(|(_, rows)| std::cmp::Reverse(rows.len()));
        let mut bin_count = vec![0usize; n_folds];
        for (_, rows) in group.iter() {
            let fold = (0..n_folds)
                .min_by_key(|&f| (bin_count[f], fold_total[f], f))
                .unwrap_or(0);
            bin_count[fold] += rows.len();
            fold_total[fold] += rows.len();
            for &i in rows.iter() {
                assignment[i] = fold;
            }
        }
    }
    Ok(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(pi2: f64) -> GmmModel {
        GmmModel::new(
            [1.0 - pi2, pi2],
            [vec![0.0], vec![4.0]],
            [vec![vec![1.0]], vec![vec![1.0]]],
        )
        .unwrap()
    }

    #[test]
    fn boundaries_fall_outside_subclinical() {
        assert_eq!(risk_bin(0.25).unwrap(), RiskBin::Healthy);
        assert_eq!(risk_bin(0.5).unwrap(), RiskBin::Subclinical);
        assert_eq!(risk_bin(0.75).unwrap(), RiskBin::Keratoconus);
        assert!(risk_bin(1.01).is_err());
        assert!(risk_bin(f64::NAN).is_err());
    }

    #[test]
    fn vanishing_prior_gives_zero() {
        let m = one_d(0.0);
        for x in [-3.0, 0.0, 4.0, 40.0] {
            assert_eq!(gmm_posterior(&[x], &m).unwrap(), 0.0);
        }
    }

    #[test]
    fn rejects_singular_and_mismatched() {
        let bad = GmmModel {
            pi: vec![0.5, 0.5],
            mu: vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            sigma: vec![vec![vec![1.0, 1.0], vec![1.0, 1.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
        };
        assert!(matches!(bad.validate(), Err(Error::SingularCovariance(0))));
        assert!(matches!(gmm_posterior(&[0.0, 1.0], &one_d(0.5)), Err(Error::Dimension(_))));
    }

    #[test]
    fn json_shape() {
        let m = GmmModel::phantom_default();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.starts_with("{\"pi\":[0.5,0.5],\"mu\":[[0.0,0.0],[1.0,0.6]],\"sigma\":[[[0.25"));
        assert_eq!(GmmModel::from_json(&text).unwrap(), m);
    }
}
