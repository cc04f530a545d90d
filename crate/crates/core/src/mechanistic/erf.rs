use serde::{Deserialize, Serialize};
use volab_tensor::{Element, Tape, Tensor, TensorError, Var};

use super::rf::theoretical_rf;
use crate::error::{invalid, Error, Result};
use crate::models::{ForwardOptions, ModelInstance};

/// Fraction of the maximum gradient a voxel must exceed to join the ERF.
pub const ERF_THRESHOLD: f64 = 0.01;

/// Gradient-magnitude map over one input volume and the region it defines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErfMap {
    pub tap: String,
    pub shape: [usize; 3],
    /// `|∂y/∂V|`, averaged over samples, row-major `[D, H, W]`.
    pub gradient: Vec<f64>,
    /// `gradient / max(gradient)`.
    pub normalized: Vec<f64>,
    pub threshold: f64,
    pub mask: Vec<bool>,
    pub erf_size: usize,
    /// Gradient-weighted centroid of the mask, `[z, y, x]` in voxels.
    pub centroid: [f64; 3],
    /// Largest distance from the centroid to a mask voxel.
    pub erf_radius: f64,
    pub theoretical_radius: Option<f64>,
    pub et_ratio: Option<f64>,
}

fn coords(shape: [usize; 3], i: usize) -> [f64; 3] {
    [(i / (shape[1] * shape[2])) as f64, ((i / shape[2]) % shape[1]) as f64, (i % shape[2]) as f64]
}

impl ErfMap {
    /// Build from a non-negative gradient map.
    pub fn from_gradient(tap: &str, shape: [usize; 3], gradient: Vec<f64>, threshold: f64) -> Result<Self> {
        if gradient.len() != shape.iter().product::<usize>() {
            return Err(Error::Dimension(format!("{} gradient values for shape {shape:?}", gradient.len())));
        }
        if !(0.0..1.0).contains(&threshold) {
            return Err(invalid(format!("threshold {threshold} outside [0, 1)")));
        }
        if gradient.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::Numeric("gradient map must be finite and non-negative".into()));
        }
        let max = gradient.iter().copied().fold(0.0, f64::max);
        if max == 0.0 {
            return Err(Error::Degenerate(format!("all-zero gradient at tap {tap}")));
        }
        let normalized: Vec<f64> = gradient.iter().map(|g| g / max).collect();
        let mask: Vec<bool> = normalized.iter().map(|&g| g > threshold).collect();
        let mut weight = 0.0;
        let mut centroid = [0.0; 3];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let c = coords(shape, i);
            for a in 0..3 {
                centroid[a] += gradient[i] * c[a];
            }
            weight += gradient[i];
        }
        centroid = centroid.map(|c| c / weight);
        let erf_radius = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| {
                let c = coords(shape, i);
                (0..3).map(|a| (c[a] - centroid[a]).powi(2)).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max);
        Ok(ErfMap {
            tap: tap.into(),
            shape,
            erf_size: mask.iter().filter(|&&m| m).count(),
            gradient,
            normalized,
            threshold,
            mask,
            centroid,
            erf_radius,
            theoretical_radius: None,
            et_ratio: None,
        })
    }

    pub fn with_theoretical(mut self, radius: f64) -> Self {
        self.theoretical_radius = Some(radius);
        self.et_ratio = (radius > 0.0).then(|| self.erf_radius / radius);
        self
    }

    /// The same gradient re-thresholded.
    pub fn rethreshold(&self, threshold: f64) -> Result<Self> {
        let mut m = ErfMap::from_gradient(&self.tap, self.shape, self.gradient.clone(), threshold)?;
        if let Some(r) = self.theoretical_radius {
            m = m.with_theoretical(r);
        }
        Ok(m)
    }
}

/// Gradient of `sum(f(x))` with respect to `x`.
pub fn input_gradient<E, F>(input: &Tensor<E>, f: F) -> Result<Tensor<E>>
where
    E: Element,
    F: for<'t> Fn(&'t Tape<E>, Var<'t, E>) -> std::result::Result<Var<'t, E>, TensorError>,
{
    let tape = Tape::new();
    let x = tape.param(input.clone());
    let y = f(&tape, x)?.sum()?;
    Ok(tape.backward(y)?.get_or_zeros(x))
}

/// Summed `|∂ target / ∂ input|` per tap over a `[B, 1, D, H, W]` batch.
/// The target is the prediction for `"output"` and the channel-summed
/// central feature of a stage otherwise; samples are independent in
/// evaluation mode, so one backward pass yields every sample's map.
pub fn erf_gradients<E: Element>(model: &ModelInstance<E>, input: &Tensor<E>, taps: &[String]) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::new();
    let vars = model.bind(&tape, false);
    let x = tape.param(input.clone());
    let out = model.forward(&vars, x, &ForwardOptions::eval())?;
    let b = input.shape()[0];
    let voxels = input.len() / b;
    let mut maps = Vec::with_capacity(taps.len());
    for tap in taps {
        let target = if tap == "output" {
            out.prediction
        } else {
            out.stages
                .iter()
                .find(|s| &s.name == tap)
                .ok_or_else(|| invalid(format!("{} has no stage {tap:?}", model.config.name)))?
                .central()?
        };
        let g = tape.backward(target.sum()?)?.get_or_zeros(x);
        let mut acc = vec![0.0; voxels];
        for chunk in g.data().chunks(voxels) {
            for (a, v) in acc.iter_mut().zip(chunk) {
                *a += v.as_f64().abs();
            }
        }
        maps.push(acc);
    }
    Ok(maps)
}

/// ERF maps per tap over all samples of `batches`, with theoretical radii.
pub fn erf_maps<E: Element>(model: &ModelInstance<E>, batches: &[Tensor<E>], taps: &[String], threshold: f64) -> Result<Vec<ErfMap>> {
    let s = model.config.input_shape;
    let mut sums = vec![vec![0.0; s.iter().product()]; taps.len()];
    let mut n = 0;
    for batch in batches {
        n += batch.shape()[0];
        for (acc, g) in sums.iter_mut().zip(erf_gradients(model, batch, taps)?) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    if n == 0 {
        return Err(invalid("no samples for ERF"));
    }
    taps.iter()
        .zip(sums)
        .map(|(tap, g)| {
            let mean = g.into_iter().map(|v| v / n as f64).collect();
            let rf = theoretical_rf(&model.config, tap)?;
            Ok(ErfMap::from_gradient(tap, s, mean, threshold)?.with_theoretical(rf.radius))
        })
        .collect()
}
