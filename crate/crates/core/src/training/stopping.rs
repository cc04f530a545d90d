use super::config::EarlyStopConfig;

/// Stops after `patience` consecutive epochs in which the validation MSE
/// fails to beat the best value so far by at least `min_delta`. The best
/// value tracks every decrease, however small.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    cfg: EarlyStopConfig,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(cfg: EarlyStopConfig) -> Self {
        EarlyStopping {
            cfg,
            best: None,
            stale: 0,
        }
    }

    /// Record one epoch; true when training should stop.
    pub fn observe(&mut self, val_mse: f64) -> bool {
        match self.best {
            None => self.best = Some(val_mse),
            Some(best) => {
                if best - val_mse >= self.cfg.min_delta {
                    self.stale = 0;
                } else {
                    self.stale += 1;
                }
                self.best = Some(best.min(val_mse));
            }
        }
        self.stale >= self.cfg.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn stale_epochs(&self) -> usize {
        self.stale
    }
}

/// 1-based epoch at which a validation trace stops training, if it does.
pub fn stopping_epoch(trace: &[f64], cfg: EarlyStopConfig) -> Option<usize> {
    let mut es = EarlyStopping::new(cfg);
    trace.iter().position(|&v| es.observe(v)).map(|i| i + 1)
}

/// 1-based epoch of the lowest value (earliest on ties).
pub fn best_epoch(trace: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in trace.iter().enumerate() {
        if best.map_or(true, |(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i + 1)
}
