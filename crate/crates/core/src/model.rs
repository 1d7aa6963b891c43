//! The complete network: two encoder branches, feature exchange after stages
//! 2 and 3, description fusion at stage 4, label-guided similarity maps at
//! stages 3 and 4, and the two classification heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::cross_attention::CrossAttention;
use crate::encoder::{image_tokens, Branch, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::guidance::{DescriptionFusion, LabelAdaptor};
use crate::layers::MapVar;
use crate::objectives::{total_loss, Heads, LossBreakdown, LossWeights, Predictions};
use crate::parallel::{self, Execution};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Grid, Heatmap, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub clip_dim: usize,
    pub desc_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config("need the background plus at least one lesion class".into()));
        }
        if self.clip_dim == 0 || self.desc_dim == 0 {
            return Err(Error::Config("embedding widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub primary: Encoder,
    pub structural: Encoder,
    pub cross: CrossAttention,
    pub fusion: DescriptionFusion,
    pub adaptor3: LabelAdaptor,
    pub adaptor4: LabelAdaptor,
    pub heads: Heads,
}

/// Per-image inputs.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub image: &'a Grid,
    pub structural: &'a Grid,
    pub description: &'a [f64],
    pub label_matrix: &'a Tensor,
}

pub struct ForwardOutput {
    /// Stage outputs after exchange (stages 2 and 3) for each branch.
    pub primary: [MapVar; 4],
    pub structural: [MapVar; 4],
    /// Description-fused final primary map.
    pub fused: MapVar,
    /// Token-major `(H_s·W_s)×K` similarity maps.
    pub sim3: MapVar,
    pub sim4: MapVar,
    pub preds: Predictions,
}

/// Heatmap sources for pseudo labels (lesion channels only).
#[derive(Clone, Debug)]
pub struct CamSources {
    /// `(K−1)×H_4×W_4`
    pub cam: Heatmap,
    /// `(K−1)×H_3×W_3`
    pub sim3: Heatmap,
    /// `(K−1)×H_4×W_4`
    pub sim4: Heatmap,
}

impl Model {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let enc = &config.encoder;
        let primary = Encoder::new(store, enc, Branch::Primary, rng)?;
        let structural = Encoder::new(store, enc, Branch::Structural, rng)?;
        let cross = CrossAttention::new(store, &enc.channels, &enc.heads, enc.mlp_ratio, rng)?;
        let fusion = DescriptionFusion::new(store, enc.channels[3], config.desc_dim, rng);
        let adaptor3 = LabelAdaptor::new(store, 3, config.clip_dim, enc.channels[2], rng)?;
        let adaptor4 = LabelAdaptor::new(store, 4, config.clip_dim, enc.channels[3], rng)?;
        let heads = Heads::new(store, enc.channels[3], config.num_classes, rng);
        Ok(Self {
            config: config.clone(),
            primary,
            structural,
            cross,
            fusion,
            adaptor3,
            adaptor4,
            heads,
        })
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        if !input.image.same_shape(input.structural) {
            return Err(Error::Dimension("image and structural input differ in size".into()));
        }
        if input.description.len() != self.config.desc_dim {
            return Err(Error::Dimension(format!(
                "description has {} entries, model expects {}",
                input.description.len(),
                self.config.desc_dim
            )));
        }
        if input.label_matrix.shape() != (self.config.num_classes, self.config.clip_dim) {
            return Err(Error::Dimension(format!(
                "label matrix is {:?}, model expects {}x{}",
                input.label_matrix.shape(),
                self.config.num_classes,
                self.config.clip_dim
            )));
        }
        self.config.encoder.check_input(input.image.height, input.image.width)
    }

    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<ForwardOutput> {
        self.check_input(input)?;
        let x = image_tokens(g, input.image);
        let xs = image_tokens(g, input.structural);

        let p1 = self.primary.stage_forward(g, 1, x)?;
        let t1 = self.structural.stage_forward(g, 1, xs)?;
        let p2 = self.primary.stage_forward(g, 2, p1)?;
        let t2 = self.structural.stage_forward(g, 2, t1)?;
        let (p2, t2) = self.cross.exchange(g, 2, p2, t2)?;
        let p3 = self.primary.stage_forward(g, 3, p2)?;
        let t3 = self.structural.stage_forward(g, 3, t2)?;
        let (p3, t3) = self.cross.exchange(g, 3, p3, t3)?;
        let p4 = self.primary.stage_forward(g, 4, p3)?;
        let t4 = self.structural.stage_forward(g, 4, t3)?;

        let desc = g.input(Tensor::row_vector(input.description));
        let fused = self.fusion.forward(g, p4, desc)?;

        let labels = g.input(input.label_matrix.clone());
        let z3 = self.adaptor3.adapt(g, labels)?;
        let z4 = self.adaptor4.adapt(g, labels)?;
        let sim3 = self.adaptor3.similarity(g, p3, t3, z3)?;
        let sim4 = self.adaptor4.similarity(g, fused, t4, z4)?;

        let preds = Predictions {
            primary: self.heads.classify(g, fused.var, self.heads.primary)?,
            structural: self.heads.classify(g, t4.var, self.heads.structural)?,
            sim3: g.col_max(sim3.var)?,
            sim4: g.col_max(sim4.var)?,
        };
        Ok(ForwardOutput {
            primary: [p1, p2, p3, fused],
            structural: [t1, t2, t3, t4],
            fused,
            sim3,
            sim4,
            preds,
        })
    }

    /// Builds the weighted objective for one image.
    pub fn loss(
        &self,
        g: &mut Graph,
        input: &ModelInput,
        label: &[f64],
        weights: &LossWeights,
    ) -> Result<(Var, LossBreakdown)> {
        if label.len() != self.config.num_classes {
            return Err(Error::Label(format!(
                "label has {} entries, model has {} classes",
                label.len(),
                self.config.num_classes
            )));
        }
        let binary = crate::dataset::binarize_label(label)?;
        let out = self.forward(g, input)?;
        total_loss(g, &out.preds, label, &binary, weights)
    }

    /// Lesion-channel heatmap sources from one forward pass.
    pub fn cam_sources(&self, store: &ParamStore, input: &ModelInput) -> Result<CamSources> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, input)?;
        let cam = cam_from_classifier(g.value(out.fused.var), store.value(self.heads.primary))?;
        let to_map = |m: MapVar| Heatmap::from_tokens(g.value(m.var), m.height, m.width);
        Ok(CamSources {
            cam: Heatmap::from_tokens(&cam, out.fused.height, out.fused.width)?,
            sim3: to_map(out.sim3)?.drop_leading(1),
            sim4: to_map(out.sim4)?.drop_leading(1),
        })
    }
}

/// Spatial application of the bias-free classifier to lesion columns:
/// `M_k[p] = Σ_c F[p,c] W[c,k]` for `k = 1..K−1`, token-major.
pub fn cam_from_classifier(features: &Tensor, head: &Tensor) -> Result<Tensor> {
    let scores = features.matmul(head)?;
    let k = head.cols();
    if k < 2 {
        return Err(Error::Dimension("classifier has no lesion column".into()));
    }
    let mut out = Tensor::zeros(scores.rows(), k - 1);
    for r in 0..scores.rows() {
        out.row_mut(r).copy_from_slice(&scores.row(r)[1..]);
    }
    Ok(out)
}

/// One training example with its precomputed structural input.
#[derive(Clone, Debug)]
pub struct TrainItem<'a> {
    pub image: Grid,
    pub structural: Grid,
    pub description: &'a [f64],
    pub label: &'a [f64],
}

/// Mean loss and gradient over a minibatch. Per-image passes may run in
/// parallel; gradients are merged in input order.
pub fn batch_gradients(
    model: &Model,
    store: &ParamStore,
    label_matrix: &Tensor,
    items: &[TrainItem],
    weights: &LossWeights,
    exec: Execution,
) -> Result<(Gradients, LossBreakdown)> {
    if items.is_empty() {
        return Err(Error::Config("empty minibatch".into()));
    }
    let scale = 1.0 / items.len() as f64;
    let per_item = parallel::try_map(exec, items, |item| -> Result<(Gradients, LossBreakdown)> {
        let mut g = Graph::new(store);
        let input = ModelInput {
            image: &item.image,
            structural: &item.structural,
            description: item.description,
            label_matrix,
        };
        let (loss, breakdown) = model.loss(&mut g, &input, item.label, weights)?;
        Ok((g.backward(loss, scale)?, breakdown))
    })?;
    let mut grads = Gradients::new(store.len());
    let mut mean = LossBreakdown::default();
    for (g, b) in &per_item {
        grads.merge(g);
        mean.add_scaled(b, scale);
    }
    Ok((grads, mean))
}
