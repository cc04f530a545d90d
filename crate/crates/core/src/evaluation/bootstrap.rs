use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;
pub const BOOTSTRAP_LEVEL: f64 = 0.95;

/// Linear interpolation between order statistics of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval of `metric(pred, target)`.
///
/// Resample `r` draws indices from its own named stream, so the result
/// depends only on `seed`. A resample on which the metric is undefined
/// (for example a single-class draw for AUROC) is redrawn from the same
/// stream; more than `10 n` draws in total is an error.
pub fn bootstrap_ci<F>(metric: F, pred: &[f64], target: &[f64], n: usize, level: f64, seed: u64) -> Result<Interval>
where
    F: Fn(&[f64], &[f64]) -> Result<f64>,
{
    if n < 100 {
        return Err(invalid(format!("{n} resamples; at least 100 required")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!("confidence level {level} outside (0, 1)")));
    }
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::Dimension(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    let m = pred.len();
    let budget = 10 * n;
    let mut draws = 0;
    let mut stats = Vec::with_capacity(n);
    let mut bp = vec![0.0; m];
    let mut bt = vec![0.0; m];
    for r in 0..n {
        let mut rng = seeds::stream(seed, "bootstrap", r as u64);
        loop {
            draws += 1;
            if draws > budget {
                return Err(Error::Undefined(format!("metric undefined on too many resamples ({budget} draws)")));
            }
            for k in 0..m {
                let i = rng.random_range(0..m);
                bp[k] = pred[i];
                bt[k] = target[i];
            }
            match metric(&bp, &bt) {
                Ok(v) if v.is_finite() => {
                    stats.push(v);
                    break;
                }
                Ok(_) | Err(Error::Undefined(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(Interval {
        lo: quantile(&stats, tail),
        hi: quantile(&stats, 1.0 - tail),
    })
}
