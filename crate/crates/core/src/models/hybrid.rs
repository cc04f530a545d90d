//! Slice encoder plus LSTM or transformer aggregator.

use volab_tensor::{Element, Tensor, Var};

use super::cnn;
use super::config::{Family, ModelConfig};
use super::init::Init;
use super::layers::{Ctx, StageLayout};
use super::tokens::Centroid;
use super::vit::{broadcast_token, init_block};
use crate::error::{invalid, Result};

pub(crate) fn init(init: &mut Init, cfg: &ModelConfig) -> Result<()> {
    cnn::init_encoder(init, cfg, "encoder.", true);
    let f = cfg.cnn_feature_width();
    let a = &cfg.aggregator;
    match cfg.family {
        Family::HybridLstm => {
            for dir in ["fwd", "bwd"] {
                init.linear(&format!("lstm.{dir}.x"), f, 4 * a.hidden, true);
                init.linear(&format!("lstm.{dir}.h"), a.hidden, 4 * a.hidden, false);
            }
            init.linear("head", 2 * a.hidden, 1, true);
        }
        Family::HybridTransformer => {
            init.embedding("agg.cls", &[1, 1, f]);
            for i in 0..a.layers {
                init_block(init, &format!("agg.block{i}"), f, cfg.mlp_ratio);
            }
            init.layer_norm("agg.norm", f);
            init.linear("head", f, 1, true);
        }
        _ => return Err(invalid("not a hybrid family")),
    }
    Ok(())
}

/// Sinusoidal encodings `[len, width]`: sin on even, cos on odd features.
pub fn sinusoidal<E: Element>(len: usize, width: usize) -> Result<Tensor<E>> {
    let mut data = Vec::with_capacity(len * width);
    for pos in 0..len {
        for i in 0..width {
            let freq = 10000f64.powf(-((i - i % 2) as f64) / width as f64);
            let angle = pos as f64 * freq;
            data.push(E::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Ok(Tensor::from_vec(&[len, width], data)?)
}

/// Centroid of slice `k` of an `[S, H, W]` stack.
pub fn slice_centroids(shape: [usize; 3]) -> Vec<Centroid> {
    (0..shape[0])
        .map(|k| [k as f64, (shape[1] - 1) as f64 / 2.0, (shape[2] - 1) as f64 / 2.0])
        .collect()
}

fn lstm_direction<'t, E: Element>(ctx: &Ctx<'_, 't, E>, dir: &str, seq: Var<'t, E>, hidden: usize, reverse: bool) -> Result<Var<'t, E>> {
    let s = seq.shape();
    let (b, len, f) = (s[0], s[1], s[2]);
    let mut h = ctx.constant(Tensor::zeros(&[b, hidden]));
    let mut c = ctx.constant(Tensor::zeros(&[b, hidden]));
    for step in 0..len {
        let t = if reverse { len - 1 - step } else { step };
        let xt = seq.slice(1, t, 1)?.reshape(&[b, f])?;
        let gates = ctx
            .linear(&format!("lstm.{dir}.x"), xt)?
            .add(ctx.linear(&format!("lstm.{dir}.h"), h)?)?;
        let gate = |k: usize| gates.slice(1, k * hidden, hidden);
        let i = gate(0)?.sigmoid()?;
        let fg = gate(1)?.sigmoid()?;
        let g = gate(2)?.tanh()?;
        let o = gate(3)?.sigmoid()?;
        c = fg.mul(c)?.add(i.mul(g)?)?;
        h = o.mul(c.tanh()?)?;
    }
    Ok(h)
}

/// Reduce per-slice features `[B, S, F]` to one vector per sample: the
/// final forward and backward LSTM states `[B, 2H]`, or the transformer's
/// class-token output `[B, F]`.
pub fn aggregate<'t, E: Element>(ctx: &Ctx<'_, 't, E>, cfg: &ModelConfig, seq: Var<'t, E>) -> Result<Var<'t, E>> {
    let s = seq.shape();
    if s.len() != 3 || s[1] == 0 {
        return Err(invalid(format!("aggregator needs a non-empty [B, S, F] sequence, got {s:?}")));
    }
    let (b, len, f) = (s[0], s[1], s[2]);
    let a = &cfg.aggregator;
    match cfg.family {
        Family::HybridLstm => {
            let fwd = lstm_direction(ctx, "fwd", seq, a.hidden, false)?;
            let bwd = lstm_direction(ctx, "bwd", seq, a.hidden, true)?;
            Ok(Var::concat(&[fwd, bwd], 1)?)
        }
        Family::HybridTransformer => {
            let mut tokens = seq;
            if a.positional {
                tokens = tokens.add(ctx.constant(sinusoidal(len, f)?))?;
            }
            let cls = broadcast_token(ctx.p("agg.cls")?, b)?;
            let mut h = Var::concat(&[cls, tokens], 1)?;
            let centroids: Vec<Option<Centroid>> = std::iter::once(None)
                .chain(slice_centroids([len, cfg.input_shape[1], cfg.input_shape[2]]).into_iter().map(Some))
                .collect();
            for i in 0..a.layers {
                h = ctx.encoder_block(&format!("agg.block{i}"), h, a.heads, a.dropout, Some(&centroids))?;
            }
            let h = ctx.layer_norm("agg.norm", h)?;
            Ok(h.slice(1, 0, 1)?.reshape(&[b, f])?)
        }
        _ => Err(invalid("not a hybrid family")),
    }
}

pub(crate) fn forward<'t, E: Element>(ctx: &Ctx<'_, 't, E>, cfg: &ModelConfig, x: Var<'t, E>) -> Result<Var<'t, E>> {
    let s = x.shape();
    let (b, slices) = (s[0], s[2]);
    let flat = x.reshape(&[b * slices, 1, 1, s[3], s[4]])?;
    let feats = cnn::encode(ctx, cfg, "encoder.", flat, true, false)?;
    let seq = feats.reshape(&[b, slices, cfg.cnn_feature_width()])?;
    ctx.stage("encoder", seq, StageLayout::Sequence);
    let pooled = aggregate(ctx, cfg, seq)?;
    ctx.stage("aggregator", pooled, StageLayout::Vector);
    ctx.linear("head", pooled)
}
