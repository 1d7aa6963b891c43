//! Feature exchange between the primary and structural branches after stages 2 and 3.
//!
//! For the primary target, queries come from the structural map and
//! keys/values from the primary map; the structural target swaps roles and
//! uses its own parameters. Each direction is a pre-norm transformer block
//! whose residual stream is the target branch.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Attention, AttentionOutput, LayerNorm, MapVar, Mlp};
use crate::params::ParamStore;

pub const EXCHANGE_STAGES: [usize; 2] = [2, 3];

#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub norm_query: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: Attention,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_query: LayerNorm::new(store, &format!("{name}.norm_query"), dim, None),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), dim, None),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, false, None, rng)?,
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), dim, None),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, mlp_ratio, None, rng),
        })
    }

    /// Bare attention: queries from `query_src`, keys and values from `kv_src`.
    pub fn cross_attend(&self, g: &mut Graph, query_src: Var, kv_src: Var) -> Result<AttentionOutput> {
        if g.shape(query_src) != g.shape(kv_src) {
            return Err(Error::Dimension(format!(
                "cross-attention sources differ: {:?} vs {:?}",
                g.shape(query_src),
                g.shape(kv_src)
            )));
        }
        self.attn.forward(g, query_src, kv_src)
    }

    /// Full block with `target` as residual stream and `other` supplying queries.
    pub fn forward(&self, g: &mut Graph, target: Var, other: Var) -> Result<Var> {
        let q = self.norm_query.forward(g, other)?;
        let kv = self.norm_kv.forward(g, target)?;
        let a = self.cross_attend(g, q, kv)?;
        let x = g.add(target, a.out)?;
        let n = self.norm_mlp.forward(g, x)?;
        let m = self.mlp.forward(g, n)?;
        g.add(x, m)
    }
}

/// Both directions at stages 2 and 3.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    /// `[stage2, stage3]` blocks producing the primary-branch output.
    pub to_primary: [CrossBlock; 2],
    /// `[stage2, stage3]` blocks producing the structural-branch output.
    pub to_structural: [CrossBlock; 2],
}

impl CrossAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        channels: &[usize; 4],
        heads: &[usize; 4],
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut make = |dir: &str| -> Result<[CrossBlock; 2]> {
            let b2 = CrossBlock::new(store, &format!("cross.s2.{dir}"), channels[1], heads[1], mlp_ratio, rng)?;
            let b3 = CrossBlock::new(store, &format!("cross.s3.{dir}"), channels[2], heads[2], mlp_ratio, rng)?;
            Ok([b2, b3])
        };
        let to_primary = make("primary")?;
        let to_structural = make("structural")?;
        Ok(Self {
            to_primary,
            to_structural,
        })
    }

    fn index(stage: usize) -> Result<usize> {
        match stage {
            2 => Ok(0),
            3 => Ok(1),
            s => Err(Error::Config(format!(
                "feature exchange is defined only after stages 2 and 3, not {s}"
            ))),
        }
    }

    /// Returns `(Z^P_s, Z^T_s)`.
    pub fn exchange(
        &self,
        g: &mut Graph,
        stage: usize,
        primary: MapVar,
        structural: MapVar,
    ) -> Result<(MapVar, MapVar)> {
        let i = Self::index(stage)?;
        if (primary.height, primary.width) != (structural.height, structural.width) {
            return Err(Error::Dimension("branch maps differ in size".into()));
        }
        let zp = self.to_primary[i].forward(g, primary.var, structural.var)?;
        let zt = self.to_structural[i].forward(g, structural.var, primary.var)?;
        Ok((MapVar { var: zp, ..primary }, MapVar { var: zt, ..structural }))
    }
}
