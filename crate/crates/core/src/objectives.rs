//! Classification heads and the four-term image-level objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, softmax_in_place, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Weights of the multi-label, binary, stage-3 and stage-4 similarity terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub primary: f64,
    pub structural: f64,
    pub sim3: f64,
    pub sim4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl LossWeights {
    pub fn uniform(w: f64) -> Self {
        Self {
            primary: w,
            structural: w,
            sim3: w,
            sim4: w,
        }
    }

    pub fn from_array(w: [f64; 4]) -> Self {
        Self {
            primary: w[0],
            structural: w[1],
            sim3: w[2],
            sim4: w[3],
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.primary, self.structural, self.sim3, self.sim4]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Per-term loss values and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 4] {
        [self.l1, self.l2, self.l3, self.l4]
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }

    pub(crate) fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.l1 += s * other.l1;
        self.l2 += s * other.l2;
        self.l3 += s * other.l3;
        self.l4 += s * other.l4;
        self.total += s * other.total;
    }
}

/// Mean sigmoid binary cross-entropy, evaluated in the overflow-free form
/// `max(z,0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> f64 {
    let k = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / k
}

/// `−Σ y_k log softmax(z)_k` via log-sum-exp.
pub fn softmax_cross_entropy(logits: &[f64], target: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| y * (lse - z))
        .sum()
}

pub fn sigmoid_probs(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&z| sigmoid(z)).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// Global max pooling over a token-major `(H·W)×C` map.
pub fn gmp(map: &Tensor) -> Result<Vec<f64>> {
    if map.rows() == 0 {
        return Err(Error::Dimension("max pooling over an empty map".into()));
    }
    let mut out = map.row(0).to_vec();
    for r in 1..map.rows() {
        for (o, &v) in out.iter_mut().zip(map.row(r)) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(out)
}

/// Bias-free linear classifiers on pooled final-stage features.
#[derive(Clone, Debug)]
pub struct Heads {
    /// `C_4×K`
    pub primary: ParamId,
    /// `C_4×2`
    pub structural: ParamId,
}

impl Heads {
    pub fn new<R: Rng>(store: &mut ParamStore, c4: usize, num_classes: usize, rng: &mut R) -> Self {
        Self {
            primary: store.add_trunc_normal("head.primary", c4, num_classes, 0.02, None, rng),
            structural: store.add_trunc_normal("head.structural", c4, 2, 0.02, None, rng),
        }
    }

    /// `GMP(F) · W`
    pub fn classify(&self, g: &mut Graph, features: Var, head: ParamId) -> Result<Var> {
        let pooled = g.col_max(features)?;
        let w = g.param(head);
        g.matmul(pooled, w)
    }
}

/// Logit rows produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Predictions {
    pub primary: Var,
    pub structural: Var,
    pub sim3: Var,
    pub sim4: Var,
}

/// Builds the weighted objective on the graph. Terms with zero weight are
/// still evaluated (for logging) but kept out of the differentiated sum.
pub fn total_loss(
    g: &mut Graph,
    preds: &Predictions,
    label: &[f64],
    binary: &[f64; 2],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let l1 = g.bce_logits(preds.primary, label)?;
    let l2 = g.softmax_ce(preds.structural, binary)?;
    let l3 = g.bce_logits(preds.sim3, label)?;
    let l4 = g.bce_logits(preds.sim4, label)?;
    let terms = [l1, l2, l3, l4];
    let w = weights.as_array();

    let mut total: Option<Var> = None;
    for (&t, &wi) in terms.iter().zip(&w) {
        if wi == 0.0 {
            continue;
        }
        let scaled = g.scale(t, wi);
        total = Some(match total {
            None => scaled,
            Some(acc) => g.add(acc, scaled)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("all loss weights are zero".into()))?;
    let value = |v: Var| g.value(v).data()[0];
    let breakdown = LossBreakdown {
        l1: value(l1),
        l2: value(l2),
        l3: value(l3),
        l4: value(l4),
        total: value(total),
    };
    Ok((total, breakdown))
}
