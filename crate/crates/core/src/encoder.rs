//! Four-stage hierarchical transformer encoder.
//!
//! Each stage merges non-overlapping `p×p` neighborhoods with a linear map
//! (strides 4, 2, 2, 2), normalizes, then applies `depth` pre-norm blocks
//! (self-attention with optional spatial reduction of keys/values, then a
//! two-layer MLP, both residual) and a closing layer norm. Stage `s` of an
//! `H×W` input therefore has spatial size `H/(4·2^{s−1}) × W/(4·2^{s−1})`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Attention, LayerNorm, Linear, MapVar, Mlp};
use crate::params::{FreezeUnit, ParamStore};
use crate::tensor::Tensor;

pub const STAGE_STRIDES: [usize; 4] = [4, 2, 2, 2];
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::mit_b2()
    }
}

impl EncoderConfig {
    /// Widths and depths following the MiT-b2 layout.
    pub fn mit_b2() -> Self {
        Self {
            channels: [64, 128, 320, 512],
            depths: [3, 4, 6, 3],
            heads: [1, 2, 5, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4,
        }
    }

    /// Small preset used for desk-scale training.
    pub fn toy() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            depths: [1, 1, 1, 1],
            heads: [1, 1, 2, 4],
            sr_ratios: [1, 1, 1, 1],
            mlp_ratio: 4,
        }
    }

    /// Minimal preset for finite-difference gradient checks.
    pub fn gradcheck() -> Self {
        Self {
            channels: [4, 8, 16, 32],
            depths: [1, 1, 1, 1],
            heads: [1, 2, 2, 4],
            sr_ratios: [1, 1, 1, 1],
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.windows(2).any(|w| w[0] >= w[1]) || self.channels[0] == 0 {
            return Err(Error::Config(format!(
                "stage channels must be strictly increasing, got {:?}",
                self.channels
            )));
        }
        for s in 0..4 {
            if self.heads[s] == 0 || !self.channels[s].is_multiple_of(self.heads[s]) {
                return Err(Error::Config(format!(
                    "stage {}: {} channels not divisible by {} heads",
                    s + 1,
                    self.channels[s],
                    self.heads[s]
                )));
            }
            if self.sr_ratios[s] == 0 {
                return Err(Error::Config("spatial reduction ratio must be ≥ 1".into()));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp ratio must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Spatial size of stage `s` (1-based).
    pub fn stage_size(&self, s: usize, height: usize, width: usize) -> (usize, usize) {
        let f = 4 << (s - 1);
        (height / f, width / f)
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
            return Err(Error::Dimension(format!(
                "input {height}x{width} is not divisible by 32"
            )));
        }
        for s in 1..=4 {
            let (h, w) = self.stage_size(s, height, width);
            let r = self.sr_ratios[s - 1];
            if h % r != 0 || w % r != 0 {
                return Err(Error::Dimension(format!(
                    "stage {s} map {h}x{w} not divisible by reduction ratio {r}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Primary,
    Structural,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Primary => "primary",
            Branch::Structural => "structural",
        }
    }
}

#[derive(Clone, Debug)]
struct SpatialReduction {
    ratio: usize,
    proj: Linear,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    sr: Option<SpatialReduction>,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn forward(&self, g: &mut Graph, x: MapVar) -> Result<Var> {
        let n = self.norm1.forward(g, x.var)?;
        let kv = match &self.sr {
            Some(sr) => {
                let p = g.patchify(n, x.height, x.width, sr.ratio)?;
                let p = sr.proj.forward(g, p)?;
                sr.norm.forward(g, p)?
            }
            None => n,
        };
        let a = self.attn.forward(g, n, kv)?;
        let x1 = g.add(x.var, a.out)?;
        let n2 = self.norm2.forward(g, x1)?;
        let m = self.mlp.forward(g, n2)?;
        g.add(x1, m)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    stride: usize,
    merge: Linear,
    merge_norm: LayerNorm,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

/// Parameters of one encoder branch.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub branch: Branch,
    stages: Vec<Stage>,
}

/// Concrete per-stage outputs of one branch.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub branch: Branch,
    /// `(height, width, tokens)` for stages 1..=4.
    pub stages: Vec<(usize, usize, Tensor)>,
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: &EncoderConfig,
        branch: Branch,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = INPUT_CHANNELS;
        for (s, &stride) in STAGE_STRIDES.iter().enumerate() {
            let c = config.channels[s];
            let stage_unit = Some(FreezeUnit::Stage(s as u8 + 1));
            // the first merge is the input projection
            let merge_unit = if s == 0 { Some(FreezeUnit::Proj) } else { stage_unit };
            let prefix = format!("encoder.{}.stage{}", branch.name(), s + 1);
            let merge = Linear::new(
                store,
                &format!("{prefix}.merge"),
                stride * stride * c_in,
                c,
                true,
                merge_unit,
                rng,
            );
            let merge_norm = LayerNorm::new(store, &format!("{prefix}.merge_norm"), c, merge_unit);
            let mut blocks = Vec::with_capacity(config.depths[s]);
            for b in 0..config.depths[s] {
                let bp = format!("{prefix}.block{b}");
                let ratio = config.sr_ratios[s];
                let sr = (ratio > 1).then(|| SpatialReduction {
                    ratio,
                    proj: Linear::new(store, &format!("{bp}.sr"), ratio * ratio * c, c, true, stage_unit, rng),
                    norm: LayerNorm::new(store, &format!("{bp}.sr_norm"), c, stage_unit),
                });
                blocks.push(Block {
                    norm1: LayerNorm::new(store, &format!("{bp}.norm1"), c, stage_unit),
                    attn: Attention::new(store, &format!("{bp}.attn"), c, config.heads[s], true, stage_unit, rng)?,
                    sr,
                    norm2: LayerNorm::new(store, &format!("{bp}.norm2"), c, stage_unit),
                    mlp: Mlp::new(store, &format!("{bp}.mlp"), c, config.mlp_ratio, stage_unit, rng),
                });
            }
            let norm = LayerNorm::new(store, &format!("{prefix}.norm"), c, stage_unit);
            stages.push(Stage {
                stride,
                merge,
                merge_norm,
                blocks,
                norm,
            });
            c_in = c;
        }
        Ok(Self {
            config: config.clone(),
            branch,
            stages,
        })
    }

    /// Runs stage `s` (1-based) on the previous stage's map (or the image).
    pub fn stage_forward(&self, g: &mut Graph, s: usize, input: MapVar) -> Result<MapVar> {
        let stage = self
            .stages
            .get(s.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("no encoder stage {s}")))?;
        let p = g.patchify(input.var, input.height, input.width, stage.stride)?;
        let x = stage.merge.forward(g, p)?;
        let mut x = MapVar {
            var: stage.merge_norm.forward(g, x)?,
            height: input.height / stage.stride,
            width: input.width / stage.stride,
        };
        for block in &stage.blocks {
            x.var = block.forward(g, x)?;
        }
        x.var = stage.norm.forward(g, x.var)?;
        Ok(x)
    }

    /// Full four-stage pass. A map in `injected[s−1]` replaces stage `s`'s
    /// output both in the pyramid and as the input of stage `s+1`.
    pub fn encode_on(
        &self,
        g: &mut Graph,
        image: MapVar,
        injected: &[Option<MapVar>; 4],
    ) -> Result<[MapVar; 4]> {
        self.config.check_input(image.height, image.width)?;
        let mut out = Vec::with_capacity(4);
        let mut cur = image;
        for s in 1..=4 {
            let mut f = self.stage_forward(g, s, cur)?;
            if let Some(rep) = injected[s - 1] {
                if (rep.height, rep.width) != (f.height, f.width)
                    || g.shape(rep.var) != g.shape(f.var)
                {
                    return Err(Error::Dimension(format!("injected stage-{s} map has the wrong shape")));
                }
                f = rep;
            }
            out.push(f);
            cur = f;
        }
        Ok([out[0], out[1], out[2], out[3]])
    }

    /// Evaluates the pyramid of a replicated-channel image.
    pub fn encode(&self, store: &ParamStore, image: &crate::tensor::Grid) -> Result<FeaturePyramid> {
        let mut g = Graph::new(store);
        let x = image_tokens(&mut g, image);
        let maps = self.encode_on(&mut g, x, &[None; 4])?;
        Ok(FeaturePyramid {
            branch: self.branch,
            stages: maps
                .iter()
                .map(|m| (m.height, m.width, g.value(m.var).clone()))
                .collect(),
        })
    }
}

/// Fixed pixel standardization applied before the patch embedding: `(v − 0.5) / 0.5`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.5;

/// Single-channel image as standardized `H·W×3` tokens (channel replication).
pub fn image_tokens(g: &mut Graph, image: &crate::tensor::Grid) -> MapVar {
    let data = image
        .data
        .iter()
        .flat_map(|&v| [(v - PIXEL_MEAN) / PIXEL_STD; INPUT_CHANNELS])
        .collect();
    let t = Tensor::from_vec(image.height * image.width, INPUT_CHANNELS, data).unwrap();
    MapVar {
        var: g.input(t),
        height: image.height,
        width: image.width,
    }
}
