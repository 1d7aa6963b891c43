//! Text guidance: description fusion at the last stage and label-embedding
//! similarity maps at stages 3 and 4.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{MapVar, INIT_STD};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const SIM_STAGES: [usize; 2] = [3, 4];

/// `W_fuse ∈ R^{(C_4 + C_desp) × C_4}`, no bias.
#[derive(Clone, Debug)]
pub struct DescriptionFusion {
    pub weight: ParamId,
    pub visual_dim: usize,
    pub text_dim: usize,
}

impl DescriptionFusion {
    pub fn new<R: Rng>(store: &mut ParamStore, c4: usize, desc_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_trunc_normal("fusion.weight", c4 + desc_dim, c4, INIT_STD, None, rng),
            visual_dim: c4,
            text_dim: desc_dim,
        }
    }

    /// `(F ⊕ broadcast(F^D)) · W_fuse`
    pub fn forward(&self, g: &mut Graph, features: MapVar, description: Var) -> Result<MapVar> {
        if g.shape(description) != (1, self.text_dim) {
            return Err(Error::Dimension(format!(
                "description vector has {} entries, fusion expects {}",
                g.shape(description).1,
                self.text_dim
            )));
        }
        if g.shape(features.var).1 != self.visual_dim {
            return Err(Error::Dimension("stage-4 width does not match fusion".into()));
        }
        let cat = g.concat_broadcast(features.var, description)?;
        let w = g.param(self.weight);
        Ok(MapVar {
            var: g.matmul(cat, w)?,
            ..features
        })
    }
}

/// Per-stage adaptor `ReLU(F^clip W¹) W²` plus learnable scale `r`.
#[derive(Clone, Debug)]
pub struct LabelAdaptor {
    pub stage: usize,
    pub w1: ParamId,
    pub w2: ParamId,
    pub scale: ParamId,
}

impl LabelAdaptor {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        stage: usize,
        clip_dim: usize,
        stage_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !SIM_STAGES.contains(&stage) {
            return Err(Error::Config(format!("similarity maps exist only at stages 3 and 4, not {stage}")));
        }
        // hidden width equals the stage width
        Ok(Self {
            stage,
            w1: store.add_trunc_normal(format!("adaptor.s{stage}.w1"), clip_dim, stage_dim, INIT_STD, None, rng),
            w2: store.add_trunc_normal(format!("adaptor.s{stage}.w2"), stage_dim, stage_dim, INIT_STD, None, rng),
            scale: store.add(format!("adaptor.s{stage}.scale"), Tensor::filled(1, 1, 1.0), None),
        })
    }

    /// Adapted label embeddings as a `K×C_s` matrix (rows = classes); the
    /// similarity product uses it transposed.
    pub fn adapt(&self, g: &mut Graph, label_matrix: Var) -> Result<Var> {
        let w1 = g.param(self.w1);
        let w2 = g.param(self.w2);
        let h = g.matmul(label_matrix, w1)?;
        let h = g.relu(h);
        g.matmul(h, w2)
    }

    /// `r · (F^P + F^T) · Z^clip` as a token-major `(H_s·W_s)×K` map.
    pub fn similarity(&self, g: &mut Graph, primary: MapVar, structural: MapVar, adapted: Var) -> Result<MapVar> {
        if (primary.height, primary.width) != (structural.height, structural.width) {
            return Err(Error::Dimension("branch maps differ in size".into()));
        }
        let visual = g.add(primary.var, structural.var)?;
        if g.shape(visual).1 != g.shape(adapted).1 {
            return Err(Error::Dimension(format!(
                "visual width {} vs adapted label width {}",
                g.shape(visual).1,
                g.shape(adapted).1
            )));
        }
        let sim = g.matmul_nt(visual, adapted)?;
        let r = g.param(self.scale);
        Ok(MapVar {
            var: g.scale_by(sim, r)?,
            ..primary
        })
    }
}
