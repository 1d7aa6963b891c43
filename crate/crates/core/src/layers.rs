//! Building blocks shared by the encoder stages and the cross-attention exchange.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{FreezeUnit, ParamId, ParamStore};
use crate::tensor::Tensor;

pub(crate) const INIT_STD: f64 = 0.02;

/// A token-major feature map living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct MapVar {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        unit: Option<FreezeUnit>,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_trunc_normal(format!("{name}.weight"), fan_in, fan_out, INIT_STD, unit, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out), unit));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, unit: Option<FreezeUnit>) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0), unit),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim), unit),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ratio: usize,
        unit: Option<FreezeUnit>,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * ratio, true, unit, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * ratio, dim, true, unit, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head attention where queries and keys/values may come from
/// different token sets.
#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Attention output together with the per-head row-stochastic affinity matrices.
pub struct AttentionOutput {
    pub out: Var,
    pub affinities: Vec<Var>,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        qkv_bias: bool,
        unit: Option<FreezeUnit>,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: {dim} channels not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            dim,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, qkv_bias, unit, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, qkv_bias, unit, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, qkv_bias, unit, rng),
            out: Linear::new(store, &format!("{name}.proj"), dim, dim, true, unit, rng),
        })
    }

    /// `softmax(Q Kᵀ / sqrt(C/h)) V` per head, heads concatenated and projected.
    pub fn forward(&self, g: &mut Graph, query_src: Var, kv_src: Var) -> Result<AttentionOutput> {
        if g.shape(query_src).1 != self.dim || g.shape(kv_src).1 != self.dim {
            return Err(Error::Dimension(format!(
                "attention over {} channels got {:?} and {:?}",
                self.dim,
                g.shape(query_src),
                g.shape(kv_src)
            )));
        }
        let q = self.q.forward(g, query_src)?;
        let k = self.k.forward(g, kv_src)?;
        let v = self.v.forward(g, kv_src)?;
        let d = self.dim / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut affinities = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * d, d)?,
                    g.slice_cols(k, h * d, d)?,
                    g.slice_cols(v, h * d, d)?,
                )
            };
            let logits = g.matmul_nt(qh, kh)?;
            let logits = g.scale(logits, scale);
            let aff = g.softmax_rows(logits);
            affinities.push(aff);
            outs.push(g.matmul(aff, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let out = self.out.forward(g, merged)?;
        Ok(AttentionOutput { out, affinities })
    }
}
