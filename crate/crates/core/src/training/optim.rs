use std::collections::BTreeMap;
use std::f64::consts::PI;

use volab_tensor::{Element, Tensor, Var};

use crate::error::{invalid, Error, Result};

/// Mean squared error.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(invalid(format!("mse needs equal nonempty lengths, got {} and {}", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// `Σ (ŷ − y)² / denominator` on the tape. With `denominator = N` this is
/// the MSE; a larger denominator lets micro-batches share one average.
pub fn squared_error_loss<'t, E: Element>(pred: Var<'t, E>, target: &[f64], denominator: usize) -> Result<Var<'t, E>> {
    let shape = pred.shape();
    if shape.iter().product::<usize>() != target.len() || target.is_empty() || denominator == 0 {
        return Err(invalid(format!("loss: prediction {shape:?} against {} targets", target.len())));
    }
    let y = pred.tape().constant(Tensor::from_f64(&shape, target)?);
    let d = pred.sub(y)?;
    Ok(d.mul(d)?.sum()?.scale(1.0 / denominator as f64)?)
}

pub fn mse_loss<'t, E: Element>(pred: Var<'t, E>, target: &[f64]) -> Result<Var<'t, E>> {
    squared_error_loss(pred, target, target.len())
}

/// `lr_min + ½ (lr_max − lr_min)(1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(invalid("cosine schedule needs at least one step"));
    }
    if step > total_steps {
        return Err(invalid(format!("step {step} beyond schedule of {total_steps}")));
    }
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1: betas[0],
            beta2: betas[1],
            eps,
            weight_decay,
            ..Self::default()
        }
    }

    /// One update of every parameter that has a gradient entry.
    pub fn update<E: Element>(
        &mut self,
        params: &mut BTreeMap<String, Tensor<E>>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
            let p = params.get(name).ok_or_else(|| invalid(format!("gradient for unknown parameter {name}")))?;
            if p.len() != g.len() {
                return Err(invalid(format!("{name}: gradient length {} for {} values", g.len(), p.len())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let mut x = w.as_f64();
                x -= lr * self.weight_decay * x;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w = E::from_f64(x);
            }
        }
        Ok(())
    }
}
