use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::labels::risk_bin;
use crate::models::AttentionRecord;

/// Attended tokens per query.
pub const TOP_K: usize = 5;
/// Distance (voxels) beyond which attention counts as long-range.
pub const LONG_RANGE: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceOptions {
    pub k: usize,
    /// Keep `i = j` pairs. Only for tests; analyses exclude them.
    pub include_self: bool,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        DistanceOptions { k: TOP_K, include_self: false }
    }
}

/// One attended pair: distance in voxels and the attention weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttendedPair {
    pub distance: f64,
    pub weight: f64,
}

/// Top-k attended pairs of every query, head and record.
///
/// Targets with zero weight (outside a window, or masked) are not
/// candidates, so fewer than `k` pairs come back when fewer tokens are
/// reachable. Queries and targets without a centroid (class tokens) are
/// skipped.
pub fn attended_pairs(records: &[AttentionRecord], opts: DistanceOptions) -> Result<Vec<AttendedPair>> {
    if opts.k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let mut out = Vec::new();
    for r in records {
        let s = r.attention.shape();
        let l = r.centroids.len();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Dimension(format!("attention of {} has shape {s:?}", r.layer)));
        }
        if l != s[1] || r.centroids.iter().all(Option::is_none) {
            return Err(invalid(format!("attention record {} lacks token centroids", r.layer)));
        }
        let a = r.attention.data();
        let mut cand: Vec<(usize, f32)> = Vec::with_capacity(l);
        for h in 0..s[0] {
            for (i, ci) in r.centroids.iter().enumerate() {
                let Some(ci) = ci else { continue };
                let row = &a[(h * l + i) * l..(h * l + i + 1) * l];
                cand.clear();
                cand.extend(
                    row.iter()
                        .copied()
                        .enumerate()
                        .filter(|&(j, w)| w > 0.0 && r.centroids[j].is_some() && (opts.include_self || j != i)),
                );
                let k = opts.k.min(cand.len());
                if k == 0 {
                    continue;
                }
                // descending weight, lower index first on ties
                let cmp = |x: &(usize, f32), y: &(usize, f32)| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0));
                if k < cand.len() {
                    cand.select_nth_unstable_by(k - 1, cmp);
                }
                for &(j, w) in &cand[..k] {
                    let cj = r.centroids[j].expect("filtered");
                    let d = (0..3).map(|a| (ci[a] - cj[a]).powi(2)).sum::<f64>().sqrt();
                    out.push(AttendedPair { distance: d, weight: f64::from(w) });
                }
            }
        }
    }
    Ok(out)
}

/// Summary of an attention-distance distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single pair.
    pub sd: f64,
    pub median: f64,
    /// Share of the selected attention mass on pairs farther than 20 voxels.
    pub pct_gt20: f64,
    pub max: f64,
}

impl DistanceStats {
    pub fn from_pairs(pairs: &[AttendedPair]) -> Result<Self> {
        let n = pairs.len();
        if n == 0 {
            return Err(Error::Undefined("no attended pairs".into()));
        }
        let mut d: Vec<f64> = pairs.iter().map(|p| p.distance).collect();
        d.sort_by(f64::total_cmp);
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let median = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
        let mass: f64 = pairs.iter().map(|p| p.weight).sum();
        let far: f64 = pairs.iter().filter(|p| p.distance > LONG_RANGE).map(|p| p.weight).sum();
        Ok(DistanceStats {
            count: n,
            mean,
            sd,
            median,
            pct_gt20: if mass > 0.0 { far / mass } else { 0.0 },
            max: d[n - 1],
        })
    }
}

pub fn attention_distance(records: &[AttentionRecord], opts: DistanceOptions) -> Result<DistanceStats> {
    DistanceStats::from_pairs(&attended_pairs(records, opts)?)
}

/// Pairs pooled per true-label risk bin and overall.
#[derive(Clone, Debug, Default)]
pub struct BinnedDistances {
    pub bins: [Vec<AttendedPair>; 3],
}

impl BinnedDistances {
    /// Add one sample's records under the bin of its soft label.
    pub fn add(&mut self, target: f64, records: &[AttentionRecord], opts: DistanceOptions) -> Result<()> {
        let pairs = attended_pairs(records, opts)?;
        self.bins[risk_bin(target)? as usize].extend(pairs);
        Ok(())
    }

    /// Statistics per bin (absent when a bin has no pairs) and overall.
    pub fn stats(&self) -> Result<([Option<DistanceStats>; 3], DistanceStats)> {
        let per = [0, 1, 2].map(|b| DistanceStats::from_pairs(&self.bins[b]).ok());
        let all: Vec<AttendedPair> = self.bins.iter().flatten().copied().collect();
        Ok((per, DistanceStats::from_pairs(&all)?))
    }
}
