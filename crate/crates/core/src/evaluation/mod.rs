//! Regression, discrimination, calibration and risk-bin metrics, with
//! percentile bootstrap intervals and the tabular report schemas.

mod bootstrap;
mod metrics;
mod report;

pub use bootstrap::{bootstrap_ci, quantile, Interval, BOOTSTRAP_LEVEL, BOOTSTRAP_RESAMPLES};
pub use metrics::{
    auroc, auroc_from_targets, binary_labels, brier_and_reliability, pearson, regression_metrics,
    stratified_sens_spec, BinRates, Calibration, RegressionMetrics, ReliabilityBin, Stratified, POSITIVE_THRESHOLD,
    RELIABILITY_BINS,
};
pub use report::{
    evaluate, read_table2, read_table3, write_ci, write_reliability, write_table2, write_table3, CiOptions, CiRow,
    MetricCi, MetricsReport, ReliabilityRow, Table2Row, Table3Row, CI_HEADER, RELIABILITY_HEADER, TABLE2_HEADER,
    TABLE3_HEADER,
};
