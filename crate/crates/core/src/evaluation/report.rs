use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bootstrap::{bootstrap_ci, Interval};
use super::metrics::{
    auroc_from_targets, binary_labels, brier_and_reliability, regression_metrics, stratified_sens_spec, ReliabilityBin,
    Stratified,
};
use crate::error::{Error, Result};
use crate::training::io::{read_rows, write_rows};

/// Bootstrap settings for report intervals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiOptions {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCi {
    pub metric: String,
    pub interval: Interval,
}

/// Every metric for one model's pooled predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub dim: usize,
    pub params: usize,
    pub n: usize,
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
    pub pearson: Option<f64>,
    pub brier: f64,
    /// Absent when the pooled targets hold a single class.
    pub auroc: Option<f64>,
    pub stratified: Stratified,
    pub reliability: Vec<ReliabilityBin>,
    #[serde(default)]
    pub ci: Vec<MetricCi>,
}

type MetricFn = fn(&[f64], &[f64]) -> Result<f64>;

fn ci_metrics() -> [(&'static str, MetricFn); 6] {
    fn field(f: impl Fn(super::metrics::RegressionMetrics) -> Option<f64>, p: &[f64], t: &[f64]) -> Result<f64> {
        f(regression_metrics(p, t)?).ok_or_else(|| Error::Undefined("constant predictions".into()))
    }
    [
        ("mse", |p, t| field(|m| Some(m.mse), p, t)),
        ("mae", |p, t| field(|m| Some(m.mae), p, t)),
        ("r2", |p, t| field(|m| Some(m.r2), p, t)),
        ("pearson", |p, t| field(|m| m.pearson, p, t)),
        ("brier", |p, t| Ok(brier_and_reliability(p, &binary_labels(t))?.brier)),
        ("auroc", auroc_from_targets),
    ]
}

pub fn evaluate(
    model: &str,
    dim: usize,
    params: usize,
    pred: &[f64],
    target: &[f64],
    ci: Option<CiOptions>,
) -> Result<MetricsReport> {
    let reg = regression_metrics(pred, target)?;
    let cal = brier_and_reliability(pred, &binary_labels(target))?;
    let auroc = match auroc_from_targets(pred, target) {
        Ok(a) => Some(a),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    let mut intervals = Vec::new();
    if let Some(opts) = ci {
        for (k, (name, f)) in ci_metrics().into_iter().enumerate() {
            let defined = match name {
                "pearson" => reg.pearson.is_some(),
                "auroc" => auroc.is_some(),
                _ => true,
            };
            if defined {
                let seed = crate::seeds::derive_seed(opts.seed, name, k as u64);
                let interval = bootstrap_ci(f, pred, target, opts.resamples, opts.level, seed)?;
                intervals.push(MetricCi { metric: name.into(), interval });
            }
        }
    }
    Ok(MetricsReport {
        model: model.into(),
        dim,
        params,
        n: pred.len(),
        mse: reg.mse,
        mae: reg.mae,
        r2: reg.r2,
        pearson: reg.pearson,
        brier: cal.brier,
        auroc,
        stratified: stratified_sens_spec(pred, target)?,
        reliability: cal.reliability,
        ci: intervals,
    })
}

/// `model,dim,params,mse,mae,r2,pearson,brier,auroc`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub model: String,
    pub dim: usize,
    pub params: usize,
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
    pub pearson: Option<f64>,
    pub brier: f64,
    pub auroc: Option<f64>,
}

/// `model,dim,healthy_sens,healthy_spec,subclinical_sens,subclinical_spec,keratoconus_sens,keratoconus_spec,balanced_accuracy`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table3Row {
    pub model: String,
    pub dim: usize,
    pub healthy_sens: Option<f64>,
    pub healthy_spec: Option<f64>,
    pub subclinical_sens: Option<f64>,
    pub subclinical_spec: Option<f64>,
    pub keratoconus_sens: Option<f64>,
    pub keratoconus_spec: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

/// `model,dim,bin,mean_pred,positive_fraction,count`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub model: String,
    pub dim: usize,
    pub bin: usize,
    pub mean_pred: f64,
    pub positive_fraction: f64,
    pub count: usize,
}

/// `model,dim,metric,lo,hi`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiRow {
    pub model: String,
    pub dim: usize,
    pub metric: String,
    pub lo: f64,
    pub hi: f64,
}

pub const TABLE2_HEADER: &str = "model,dim,params,mse,mae,r2,pearson,brier,auroc";
pub const TABLE3_HEADER: &str = "model,dim,healthy_sens,healthy_spec,subclinical_sens,subclinical_spec,keratoconus_sens,keratoconus_spec,balanced_accuracy";
pub const RELIABILITY_HEADER: &str = "model,dim,bin,mean_pred,positive_fraction,count";
pub const CI_HEADER: &str = "model,dim,metric,lo,hi";

impl MetricsReport {
    pub fn table2(&self) -> Table2Row {
        Table2Row {
            model: self.model.clone(),
            dim: self.dim,
            params: self.params,
            mse: self.mse,
            mae: self.mae,
            r2: self.r2,
            pearson: self.pearson,
            brier: self.brier,
            auroc: self.auroc,
        }
    }

    pub fn table3(&self) -> Table3Row {
        let [h, s, k] = self.stratified.bins;
        Table3Row {
            model: self.model.clone(),
            dim: self.dim,
            healthy_sens: h.sensitivity,
            healthy_spec: h.specificity,
            subclinical_sens: s.sensitivity,
            subclinical_spec: s.specificity,
            keratoconus_sens: k.sensitivity,
            keratoconus_spec: k.specificity,
            balanced_accuracy: self.stratified.balanced_accuracy,
        }
    }

    pub fn reliability_rows(&self) -> Vec<ReliabilityRow> {
        self.reliability
            .iter()
            .enumerate()
            .map(|(bin, r)| ReliabilityRow {
                model: self.model.clone(),
                dim: self.dim,
                bin,
                mean_pred: r.mean_pred,
                positive_fraction: r.positive_fraction,
                count: r.count,
            })
            .collect()
    }

    pub fn ci_rows(&self) -> Vec<CiRow> {
        self.ci
            .iter()
            .map(|c| CiRow {
                model: self.model.clone(),
                dim: self.dim,
                metric: c.metric.clone(),
                lo: c.interval.lo,
                hi: c.interval.hi,
            })
            .collect()
    }
}

pub fn write_table2(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_rows(path, &reports.iter().map(MetricsReport::table2).collect::<Vec<_>>())
}

pub fn write_table3(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_rows(path, &reports.iter().map(MetricsReport::table3).collect::<Vec<_>>())
}

pub fn write_reliability(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_rows(path, &reports.iter().flat_map(MetricsReport::reliability_rows).collect::<Vec<_>>())
}

pub fn write_ci(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_rows(path, &reports.iter().flat_map(MetricsReport::ci_rows).collect::<Vec<_>>())
}

pub fn read_table2(path: &Path) -> Result<Vec<Table2Row>> {
    read_rows(path)
}

pub fn read_table3(path: &Path) -> Result<Vec<Table3Row>> {
    read_rows(path)
}
