//! Model families, their construction and the forward pass.
//!
//! Parameters live in a flat name → tensor map. A forward pass binds them
//! to a [`Tape`], so the same instance serves training (trainable leaves),
//! inference (constants) and 64-bit gradient checks (after [`ModelInstance::cast`]).

mod cnn;
mod config;
mod hybrid;
mod init;
mod layers;
mod swin;
mod tokens;
mod vit;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volab_tensor::{BatchStats, Element, Tape, Tensor, Var};

pub use config::{AggregatorConfig, BlockKind, Family, ModelConfig, PadPolicy, Scale};
pub use hybrid::{aggregate as hybrid_aggregate, sinusoidal, slice_centroids};
pub use layers::{AttentionRecord, Ctx, Stage, StageLayout};
pub use swin::{patch_merge, schedule as swin_schedule, window_attention, SwinStage};
pub use tokens::{
    effective_window, merge_gather, merge_plan, patch_plan, relative_table_len, window_partition, window_plan,
    window_reverse, Centroid, MergePlan, PatchPlan, TokenGrid, WindowPlan, MASK_NEG,
};
pub use vit::patch_embed as vit_patch_embed;
pub use swin::patch_embed as swin_patch_embed;

use crate::error::{invalid, Error, Result};
use init::Init;

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub train: bool,
    pub record_attention: bool,
    /// Seeds dropout masks; without it dropout is skipped.
    pub dropout_seed: Option<u64>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(seed: u64) -> Self {
        ForwardOptions {
            train: true,
            record_attention: false,
            dropout_seed: Some(seed),
        }
    }

    pub fn recording() -> Self {
        ForwardOptions {
            record_attention: true,
            ..Self::default()
        }
    }
}

pub struct ForwardOutput<'t, E: Element> {
    /// Sigmoid outputs `[B]`.
    pub prediction: Var<'t, E>,
    pub stages: Vec<Stage<'t, E>>,
    pub attention: Vec<AttentionRecord>,
    pub bn_stats: Vec<(String, BatchStats<E>)>,
}

/// A configured model with its parameters and batch-norm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInstance<E: Element = f32> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<E>>,
    pub buffers: BTreeMap<String, Tensor<E>>,
}

/// Build a model with parameters drawn from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ModelInstance> {
    cfg.validate()?;
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
    match cfg.family {
        Family::Cnn => cnn::init(&mut init, cfg),
        Family::Vit => vit::init(&mut init, cfg)?,
        Family::Swin => swin::init(&mut init, cfg)?,
        Family::HybridLstm | Family::HybridTransformer => hybrid::init(&mut init, cfg)?,
    }
    Ok(ModelInstance {
        config: cfg.clone(),
        params: init.params,
        buffers: init.buffers,
    })
}

impl<E: Element> ModelInstance<E> {
    pub fn cast<F: Element>(&self) -> ModelInstance<F> {
        let conv = |m: &BTreeMap<String, Tensor<E>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        ModelInstance {
            config: self.config.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Input shape `[1, D, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 4] {
        let s = self.config.input_shape;
        [1, s[0], s[1], s[2]]
    }

    /// Analysis stages in forward order.
    pub fn stage_names(&self) -> Vec<String> {
        let cfg = &self.config;
        match cfg.family {
            Family::Cnn => (1..=cfg.stage_depths.len()).map(|s| format!("stage{s}")).collect(),
            Family::Vit => (0..cfg.stage_depths[0]).map(|i| format!("block{i}")).collect(),
            Family::Swin => std::iter::once("patch_embed".to_string())
                .chain((1..=cfg.stage_depths.len()).map(|s| format!("stage{s}")))
                .collect(),
            Family::HybridLstm | Family::HybridTransformer => vec!["encoder".into(), "aggregator".into()],
        }
    }

    /// Parameters as tape leaves; `trainable` decides whether gradients flow.
    pub fn bind<'t>(&self, tape: &'t Tape<E>, trainable: bool) -> BTreeMap<String, Var<'t, E>> {
        self.params
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.param(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect()
    }

    pub fn context<'a, 't>(&'a self, tape: &'t Tape<E>, vars: &'a BTreeMap<String, Var<'t, E>>, opts: &ForwardOptions) -> Ctx<'a, 't, E> {
        Ctx::new(
            tape,
            vars,
            &self.buffers,
            opts.train,
            opts.record_attention,
            opts.dropout_seed.map(ChaCha8Rng::seed_from_u64),
        )
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.sample_shape();
        if shape.len() != 5 || shape[1..] != want {
            return Err(Error::Dimension(format!("model expects [B, {want:?}], got {shape:?}")));
        }
        Ok(())
    }

    /// Forward `[B, 1, D, H, W]` through the model.
    pub fn forward<'t>(
        &self,
        vars: &BTreeMap<String, Var<'t, E>>,
        input: Var<'t, E>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput<'t, E>> {
        self.check_input(&input.shape())?;
        let ctx = self.context(input.tape(), vars, opts);
        let cfg = &self.config;
        let logits = match cfg.family {
            Family::Cnn => cnn::forward(&ctx, cfg, input)?,
            Family::Vit => vit::forward(&ctx, cfg, input)?,
            Family::Swin => swin::forward(&ctx, cfg, input)?,
            Family::HybridLstm | Family::HybridTransformer => hybrid::forward(&ctx, cfg, input)?,
        };
        let b = input.shape()[0];
        let prediction = logits.sigmoid()?.reshape(&[b])?;
        if !prediction.value().is_finite() {
            return Err(Error::Numeric(format!("{} produced a non-finite prediction", cfg.name)));
        }
        Ok(ForwardOutput {
            prediction,
            stages: ctx.stages.into_inner(),
            attention: ctx.attention.into_inner(),
            bn_stats: ctx.bn_stats.into_inner(),
        })
    }

    /// Inference-mode predictions for a `[B, 1, D, H, W]` batch.
    pub fn predict(&self, input: &Tensor<E>) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let x = tape.constant(input.clone());
        let out = self.forward(&vars, x, &ForwardOptions::eval())?;
        Ok(out.prediction.value().to_f64_vec())
    }

    /// Exponential update of the running batch-norm statistics.
    pub fn apply_bn_stats(&mut self, stats: &[(String, BatchStats<E>)], momentum: f64) -> Result<()> {
        for (prefix, s) in stats {
            for (key, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{prefix}.{key}");
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| invalid(format!("unknown buffer {name}")))?;
                for (r, &v) in buf.data_mut().iter_mut().zip(batch) {
                    *r = E::from_f64((1.0 - momentum) * r.as_f64() + momentum * v.as_f64());
                }
            }
        }
        Ok(())
    }

    /// Parameters and buffers as one named list.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<E>)> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

impl ModelInstance {
    /// Rebuild from `named_tensors` output, checking names and shapes
    /// against the configuration.
    pub fn from_named_tensors(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = build_model(config, 0)?;
        let expected = model.params.len() + model.buffers.len();
        if tensors.len() != expected {
            return Err(Error::Format(format!("expected {expected} tensors, found {}", tensors.len())));
        }
        for (name, t) in tensors {
            let slot = match model.params.get_mut(&name) {
                Some(s) => s,
                None => model
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?,
            };
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(model)
    }
}
