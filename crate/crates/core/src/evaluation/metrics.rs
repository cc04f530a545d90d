use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::labels::{risk_bin, RiskBin};

/// Positive class for discrimination and calibration metrics.
pub const POSITIVE_THRESHOLD: f64 = 0.5;

pub fn binary_labels(target: &[f64]) -> Vec<bool> {
    target.iter().map(|&t| t > POSITIVE_THRESHOLD).collect()
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(invalid("empty input"));
    }
    if pred.len() != target.len() {
        return Err(Error::Dimension(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite value"));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
    /// `None` when the predictions are constant.
    pub pearson: Option<f64>,
}

pub fn regression_metrics(pred: &[f64], target: &[f64]) -> Result<RegressionMetrics> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    let ty = mean(target);
    let ss_tot: f64 = target.iter().map(|t| (t - ty).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Undefined("r2 needs a non-constant target".into()));
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    let mae = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    Ok(RegressionMetrics {
        mse: ss_res / n,
        mae,
        r2: 1.0 - ss_res / ss_tot,
        pearson: pearson(pred, target).ok(),
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("pearson correlation of a constant".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Mann–Whitney AUROC from midranks; ties count one half.
pub fn auroc(pred: &[f64], label: &[bool]) -> Result<f64> {
    if pred.len() != label.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", pred.len(), label.len())));
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite prediction"));
    }
    let n_pos = label.iter().filter(|&&l| l).count();
    let n_neg = label.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("auroc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pred[order[j + 1]] == pred[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * order[i..=j].iter().filter(|&&k| label[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// AUROC against the thresholded continuous target.
pub fn auroc_from_targets(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    auroc(pred, &binary_labels(target))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub mean_pred: f64,
    pub positive_fraction: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub brier: f64,
    pub reliability: Vec<ReliabilityBin>,
}

pub const RELIABILITY_BINS: usize = 10;

/// Brier score and equal-frequency reliability table.
///
/// Samples are sorted by prediction (ties keep input order) and cut into
/// `min(10, n)` consecutive bins; the first `n mod bins` bins hold one
/// extra sample.
pub fn brier_and_reliability(pred: &[f64], label: &[bool]) -> Result<Calibration> {
    if pred.is_empty() {
        return Err(invalid("empty input"));
    }
    if pred.len() != label.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", pred.len(), label.len())));
    }
    if let Some(p) = pred.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(invalid(format!("prediction {p} outside [0, 1]")));
    }
    let y = |k: usize| if label[k] { 1.0 } else { 0.0 };
    let n = pred.len();
    let brier = (0..n).map(|k| (pred[k] - y(k)).powi(2)).sum::<f64>() / n as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]));
    let bins = RELIABILITY_BINS.min(n);
    let mut reliability = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        let count = n / bins + usize::from(b < n % bins);
        let members = &order[start..start + count];
        reliability.push(ReliabilityBin {
            mean_pred: members.iter().map(|&k| pred[k]).sum::<f64>() / count as f64,
            positive_fraction: members.iter().map(|&k| y(k)).sum::<f64>() / count as f64,
            count,
        });
        start += count;
    }
    Ok(Calibration { brier, reliability })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRates {
    pub bin: RiskBin,
    /// Samples whose target falls in this bin.
    pub support: usize,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratified {
    pub bins: [BinRates; 3],
    /// Mean of the three sensitivities; absent if any is.
    pub balanced_accuracy: Option<f64>,
}

/// One-vs-rest sensitivity and specificity of risk-bin membership.
pub fn stratified_sens_spec(pred: &[f64], target: &[f64]) -> Result<Stratified> {
    check_pair(pred, target)?;
    let truth = target.iter().map(|&t| risk_bin(t)).collect::<Result<Vec<_>>>()?;
    let guess = pred.iter().map(|&p| risk_bin(p)).collect::<Result<Vec<_>>>()?;
    let rates = RiskBin::ALL.map(|bin| {
        let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
        for (t, g) in truth.iter().zip(&guess) {
            if *t == bin {
                pos += 1;
                tp += usize::from(*g == bin);
            } else {
                neg += 1;
                tn += usize::from(*g != bin);
            }
        }
        BinRates {
            bin,
            support: pos,
            sensitivity: (pos > 0).then(|| tp as f64 / pos as f64),
            specificity: (neg > 0).then(|| tn as f64 / neg as f64),
        }
    });
    let sens: Option<Vec<f64>> = rates.iter().map(|r| r.sensitivity).collect();
    Ok(Stratified {
        bins: rates,
        balanced_accuracy: sens.map(|s| s.iter().sum::<f64>() / 3.0),
    })
}
