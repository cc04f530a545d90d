//! Forward-pass context and the layers shared by all families.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use volab_tensor::{BatchStats, Element, NormStats, Tape, Tensor, Var};

use super::tokens::Centroid;
use crate::error::{invalid, Result};

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const BN_EPS: f64 = 1e-5;

/// How a stage activation is laid out, so analyses can find its centre.
#[derive(Clone, Debug, PartialEq)]
pub enum StageLayout {
    /// `[B, C, D, H, W]` feature maps.
    Volume,
    /// `[B, L(+1), C]` tokens over `grid`.
    Tokens { grid: [usize; 3], cls: bool },
    /// `[B, S, C]` per-slice features.
    Sequence,
    /// `[B, C]` pooled features.
    Vector,
}

/// Activation at one analysis stage.
#[derive(Clone, Debug)]
pub struct Stage<'t, E: Element> {
    pub name: String,
    pub value: Var<'t, E>,
    pub layout: StageLayout,
}

impl<'t, E: Element> Stage<'t, E> {
    /// Sum over channels of the spatially central feature, per sample `[B]`.
    pub fn central(&self) -> Result<Var<'t, E>> {
        let s = self.value.shape();
        let b = s[0];
        let v = match &self.layout {
            StageLayout::Volume => self
                .value
                .slice(2, s[2] / 2, 1)?
                .slice(3, s[3] / 2, 1)?
                .slice(4, s[4] / 2, 1)?
                .reshape(&[b, s[1]])?,
            StageLayout::Tokens { grid, cls } => {
                let centre = [0, 1, 2].map(|a| grid[a] / 2);
                let t = usize::from(*cls) + (centre[0] * grid[1] + centre[1]) * grid[2] + centre[2];
                self.value.slice(1, t, 1)?.reshape(&[b, s[2]])?
            }
            StageLayout::Sequence => self.value.slice(1, s[1] / 2, 1)?.reshape(&[b, s[2]])?,
            StageLayout::Vector => self.value,
        };
        let c = v.shape()[1];
        Ok(v.mean_axis(1)?.scale(c as f64)?)
    }

    /// Activation flattened to `[B, features]`.
    pub fn flattened(&self) -> Result<Var<'t, E>> {
        let s = self.value.shape();
        Ok(self.value.reshape(&[s[0], s[1..].iter().product()])?)
    }
}

/// Attention weights of one layer for one sample, dense over the layer's
/// tokens in their original order.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: String,
    pub sample: usize,
    pub heads: usize,
    /// `[H, L, L]`, rows sum to 1.
    pub attention: Tensor<f32>,
    /// Per token; `None` for a class token.
    pub centroids: Vec<Option<Centroid>>,
}

pub struct Ctx<'a, 't, E: Element> {
    pub tape: &'t Tape<E>,
    vars: &'a BTreeMap<String, Var<'t, E>>,
    buffers: &'a BTreeMap<String, Tensor<E>>,
    pub train: bool,
    pub record_attention: bool,
    pub(crate) bn_stats: RefCell<Vec<(String, BatchStats<E>)>>,
    pub(crate) attention: RefCell<Vec<AttentionRecord>>,
    pub(crate) stages: RefCell<Vec<Stage<'t, E>>>,
    dropout_rng: RefCell<Option<ChaCha8Rng>>,
}

impl<'a, 't, E: Element> Ctx<'a, 't, E> {
    pub fn new(
        tape: &'t Tape<E>,
        vars: &'a BTreeMap<String, Var<'t, E>>,
        buffers: &'a BTreeMap<String, Tensor<E>>,
        train: bool,
        record_attention: bool,
        dropout_rng: Option<ChaCha8Rng>,
    ) -> Self {
        Ctx {
            tape,
            vars,
            buffers,
            train,
            record_attention,
            bn_stats: RefCell::new(Vec::new()),
            attention: RefCell::new(Vec::new()),
            stages: RefCell::new(Vec::new()),
            dropout_rng: RefCell::new(dropout_rng),
        }
    }

    pub fn p(&self, name: &str) -> Result<Var<'t, E>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn constant(&self, t: Tensor<E>) -> Var<'t, E> {
        self.tape.constant(t)
    }

    pub fn stage(&self, name: impl Into<String>, value: Var<'t, E>, layout: StageLayout) {
        self.stages.borrow_mut().push(Stage {
            name: name.into(),
            value,
            layout,
        });
    }

    /// `x · W (+ b)` over the last axis.
    pub fn linear(&self, prefix: &str, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let y = x.matmul(self.p(&format!("{prefix}.weight"))?)?;
        let bias = format!("{prefix}.bias");
        if self.has(&bias) {
            Ok(y.add(self.p(&bias)?)?)
        } else {
            Ok(y)
        }
    }

    pub fn layer_norm(&self, prefix: &str, x: Var<'t, E>) -> Result<Var<'t, E>> {
        Ok(x.layer_norm(self.p(&format!("{prefix}.gamma"))?, self.p(&format!("{prefix}.beta"))?, LN_EPS)?)
    }

    /// Batch statistics in training (recorded for the running averages),
    /// running statistics otherwise.
    pub fn batch_norm(&self, prefix: &str, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        if self.train {
            let (y, stats) = x.batch_norm(gamma, beta, NormStats::Batch, BN_EPS)?;
            if let Some(stats) = stats {
                self.bn_stats.borrow_mut().push((prefix.to_string(), stats));
            }
            Ok(y)
        } else {
            let buf = |k: &str| {
                self.buffers
                    .get(&format!("{prefix}.{k}"))
                    .ok_or_else(|| invalid(format!("missing buffer {prefix}.{k}")))
            };
            let (mean, var) = (buf("running_mean")?, buf("running_var")?);
            let (y, _) = x.batch_norm(
                gamma,
                beta,
                NormStats::Running {
                    mean: mean.data(),
                    var: var.data(),
                },
                BN_EPS,
            )?;
            Ok(y)
        }
    }

    pub fn conv(&self, name: &str, x: Var<'t, E>, stride: [usize; 3], padding: [usize; 3]) -> Result<Var<'t, E>> {
        Ok(x.conv3d(self.p(&format!("{name}.weight"))?, None, stride, padding)?)
    }

    /// Inverted dropout; identity outside training or when `p = 0`.
    pub fn dropout(&self, x: Var<'t, E>, p: f64) -> Result<Var<'t, E>> {
        if !self.train || p <= 0.0 {
            return Ok(x);
        }
        let mut guard = self.dropout_rng.borrow_mut();
        let Some(rng) = guard.as_mut() else {
            return Ok(x);
        };
        let shape = x.shape();
        let keep = E::from_f64(1.0 / (1.0 - p));
        let data = (0..shape.iter().product::<usize>())
            .map(|_| if rng.random::<f64>() < p { E::zero() } else { keep })
            .collect();
        Ok(x.mul(self.constant(Tensor::from_vec(&shape, data)?))?)
    }

    /// Two-layer GELU feed-forward.
    pub fn ffn(&self, prefix: &str, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let h = self.linear(&format!("{prefix}.fc1"), x)?.gelu()?;
        self.linear(&format!("{prefix}.fc2"), h)
    }

    /// Multi-head self-attention over `[Bw, N, D]`. `bias` (`[h, N, N]`) is
    /// added to every group; `mask` (`[G, h, N, N]`) to each run of `G`
    /// consecutive groups (windows). Returns the output and the attention
    /// weights `[Bw · h, N, N]`.
    pub fn msa(
        &self,
        prefix: &str,
        x: Var<'t, E>,
        heads: usize,
        bias: Option<Var<'t, E>>,
        mask: Option<Var<'t, E>>,
    ) -> Result<(Var<'t, E>, Var<'t, E>)> {
        let s = x.shape();
        let (bw, n, d) = (s[0], s[1], s[2]);
        if d % heads != 0 {
            return Err(invalid(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let qkv = self
            .linear(&format!("{prefix}.qkv"), x)?
            .reshape(&[bw, n, 3, heads, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| -> Result<Var<'t, E>> { Ok(qkv.slice(0, i, 1)?.reshape(&[bw * heads, n, dh])?) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let mut scores = q.bmm(k, true)?.scale(1.0 / (dh as f64).sqrt())?;
        if let Some(b) = bias {
            scores = scores.reshape(&[bw, heads, n, n])?.add(b)?;
        }
        if let Some(m) = mask {
            let g = m.shape()[0];
            scores = scores.reshape(&[bw / g, g, heads, n, n])?.add(m)?;
        }
        let attn = scores.reshape(&[bw * heads, n, n])?.softmax(2)?;
        let out = attn
            .bmm(v, false)?
            .reshape(&[bw, heads, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[bw, n, d])?;
        Ok((self.linear(&format!("{prefix}.proj"), out)?, attn))
    }

    /// Pre-norm transformer block with global attention:
    /// `x + MSA(LN(x))`, then `+ FFN(LN(·))`.
    pub fn encoder_block(
        &self,
        prefix: &str,
        x: Var<'t, E>,
        heads: usize,
        dropout: f64,
        centroids: Option<&[Option<Centroid>]>,
    ) -> Result<Var<'t, E>> {
        let normed = self.layer_norm(&format!("{prefix}.ln1"), x)?;
        let (a, weights) = self.msa(&format!("{prefix}.attn"), normed, heads, None, None)?;
        if let Some(c) = centroids {
            self.record_global(prefix, weights, heads, c)?;
        }
        let h = x.add(self.dropout(a, dropout)?)?;
        let f = self.ffn(&format!("{prefix}.mlp"), self.layer_norm(&format!("{prefix}.ln2"), h)?)?;
        Ok(h.add(self.dropout(f, dropout)?)?)
    }

    fn record_global(&self, layer: &str, weights: Var<'t, E>, heads: usize, centroids: &[Option<Centroid>]) -> Result<()> {
        if !self.record_attention {
            return Ok(());
        }
        let w = weights.value();
        let n = w.shape()[1];
        let per = heads * n * n;
        let batch = w.len() / per;
        let data = w.data();
        let mut records = self.attention.borrow_mut();
        for b in 0..batch {
            let slab = data[b * per..(b + 1) * per].iter().map(|v| v.as_f64() as f32).collect();
            records.push(AttentionRecord {
                layer: layer.to_string(),
                sample: b,
                heads,
                attention: Tensor::from_vec(&[heads, n, n], slab)?,
                centroids: centroids.to_vec(),
            });
        }
        Ok(())
    }
}
