//! The detector: backbone, encoder, twin decoders fed by one query set,
//! shared classification head, per-decoder regression heads and the
//! contrastive projector.

mod backbone;
mod checkpoint;
mod nn;
mod transformer;

use candle_core::{Device, Module, Tensor, TensorId};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data::image_to_tensor;
use crate::error::{Error, Result};
use crate::geometry::{box_from_prediction, BoxCXCYWH, BoxDecoder, KeypointPair, Point};

pub use backbone::{sine_point_embedding, sine_position_grid, Backbone, FeatureMap};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use nn::{inverse_sigmoid, sigmoid, softmax_last_dim, ForwardCtx, Init, LayerNorm, Mlp, ParamStore};
pub use transformer::{attend, Decoder, DecoderTrace, Encoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_queries: usize,
    pub n_classes: usize,
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub dim_feedforward: usize,
    pub projection_dim: usize,
    pub dropout: f64,
    /// Give the top-left decoder its own classification head.
    pub separate_class_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 3,
            n_decoder_layers: 3,
            n_queries: 16,
            n_classes: 6,
            backbone_channels: vec![16, 32, 64, 64],
            backbone_strides: vec![2, 2, 2, 1],
            dim_feedforward: 128,
            projection_dim: 32,
            dropout: 0.1,
            separate_class_heads: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ModelConfig(m));
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_decoder_layers", self.n_decoder_layers),
            ("n_queries", self.n_queries),
            ("n_classes", self.n_classes),
            ("dim_feedforward", self.dim_feedforward),
            ("projection_dim", self.projection_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        // the point embedding splits each half of d_model into sine/cosine pairs
        if self.d_model % 4 != 0 {
            return bad(format!("d_model {} must be a multiple of 4", self.d_model));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.len() != self.backbone_strides.len() {
            return bad("backbone_channels and backbone_strides must be non-empty and of equal length".into());
        }
        if self.backbone_channels.contains(&0) || self.backbone_strides.contains(&0) {
            return bad("backbone channels and strides must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }
}

/// The learned object queries, one instance shared by both decoders.
#[derive(Debug, Clone)]
pub struct ObjectQuerySet {
    embeddings: Tensor,
}

impl ObjectQuerySet {
    /// `(Q, d_model)` embeddings.
    pub fn new(embeddings: Tensor) -> Self {
        Self { embeddings }
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn id(&self) -> TensorId {
        self.embeddings.id()
    }

    pub fn len(&self) -> usize {
        self.embeddings.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let idx = Tensor::from_vec(perm.iter().map(|&i| i as u32).collect::<Vec<_>>(), perm.len(), self.embeddings.device())?;
        Ok(Self { embeddings: self.embeddings.index_select(&idx, 0)? })
    }
}

/// Which decoder an output belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Center,
    TopLeft,
}

/// Everything one decoder produces, per layer.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `L × (B, Q, d_model)`, after the final norm.
    pub embeddings: Vec<Tensor>,
    /// `L × (B, Q, n_classes)`.
    pub logits: Vec<Tensor>,
    /// `L × (B, Q, 4)` for the center decoder, `L × (B, Q, 2)` for top-left.
    pub boxes: Vec<Tensor>,
    /// `L × (B, Q, projection_dim)`.
    pub projections: Vec<Tensor>,
    /// `(B, Q, 2)`.
    pub reference: Tensor,
}

impl DecoderOutput {
    pub fn n_layers(&self) -> usize {
        self.embeddings.len()
    }

    pub fn last_logits(&self) -> &Tensor {
        self.logits.last().expect("decoder has layers")
    }

    pub fn last_boxes(&self) -> &Tensor {
        self.boxes.last().expect("decoder has layers")
    }

    pub fn last_projections(&self) -> &Tensor {
        self.projections.last().expect("decoder has layers")
    }
}

/// Outputs of both decoders, index-aligned along the query axis.
#[derive(Debug, Clone)]
pub struct PairDecoderOutput {
    pub center: DecoderOutput,
    pub top_left: DecoderOutput,
    /// Identity of the query tensor each decoder consumed.
    pub query_ids: [TensorId; 2],
}

impl PairDecoderOutput {
    pub fn n_queries(&self) -> usize {
        self.center.reference.dim(1).unwrap_or(0)
    }

    pub fn batch_size(&self) -> usize {
        self.center.reference.dim(0).unwrap_or(0)
    }

    pub fn decoder(&self, role: Role) -> &DecoderOutput {
        match role {
            Role::Center => &self.center,
            Role::TopLeft => &self.top_left,
        }
    }
}

/// Prediction FFNs; each is shared by all layers of its decoder.
#[derive(Debug, Clone)]
pub struct Heads {
    pub class: candle_nn::Linear,
    pub class_top_left: Option<candle_nn::Linear>,
    pub box_center: Mlp,
    pub point_top_left: Mlp,
    pub projector: Mlp,
}

impl Heads {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> candle_core::Result<Self> {
        let d = cfg.d_model;
        // prior probability 0.01 for every class at start
        let prior_bias = -((1.0 - 0.01) / 0.01f64).ln();
        let class_head = |store: &mut ParamStore, name: &str| -> candle_core::Result<candle_nn::Linear> {
            let bound = (6.0 / (d + cfg.n_classes) as f64).sqrt();
            let w = store.uniform(format!("{name}.weight"), &[cfg.n_classes, d], bound)?;
            let b = store.constant(format!("{name}.bias"), &[cfg.n_classes], prior_bias)?;
            Ok(candle_nn::Linear::new(w, Some(b)))
        };
        let class = class_head(store, "heads.class")?;
        let class_top_left = if cfg.separate_class_heads { Some(class_head(store, "heads.class_top_left")?) } else { None };
        Ok(Self {
            class,
            class_top_left,
            box_center: Mlp::new(store, "heads.box_center", &[d, d, d, 4], true)?,
            point_top_left: Mlp::new(store, "heads.point_top_left", &[d, d, d, 2], true)?,
            projector: Mlp::new(store, "projector", &[d, d, cfg.projection_dim], false)?,
        })
    }

    fn class_for(&self, role: Role) -> &candle_nn::Linear {
        match (role, &self.class_top_left) {
            (Role::TopLeft, Some(h)) => h,
            _ => &self.class,
        }
    }

    /// Applies the heads of `role` to every layer of `trace`.
    pub fn forward(&self, trace: &DecoderTrace, role: Role) -> candle_core::Result<DecoderOutput> {
        let ref_logit = inverse_sigmoid(&trace.reference)?;
        let (reg, offset) = match role {
            Role::Center => (&self.box_center, Tensor::cat(&[&ref_logit, &ref_logit.zeros_like()?], 2)?),
            Role::TopLeft => (&self.point_top_left, ref_logit),
        };
        let n = trace.embeddings.len();
        let (mut logits, mut boxes, mut projections) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for e in &trace.embeddings {
            logits.push(self.class_for(role).forward(e)?);
            boxes.push(sigmoid(&(reg.forward(e)? + &offset)?)?);
            projections.push(self.projector.forward(e)?);
        }
        Ok(DecoderOutput { embeddings: trace.embeddings.clone(), logits, boxes, projections, reference: trace.reference.clone() })
    }
}

/// One detection from [`PairDetr::predict`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoxCXCYWH,
    pub class_id: usize,
    pub score: f64,
}

pub struct PairDetr {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    encoder: Encoder,
    queries: ObjectQuerySet,
    center: Decoder,
    top_left: Decoder,
    heads: Heads,
}

impl PairDetr {
    /// Builds a freshly initialized model; parameters are drawn in a fixed
    /// order from `seed`.
    pub fn new(config: &ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut store = ParamStore::new(seed, device);
        let backbone = Backbone::new(&mut store, &c.backbone_channels, &c.backbone_strides, c.d_model)?;
        let encoder = Encoder::new(&mut store, c.n_encoder_layers, c.d_model, c.n_heads, c.dim_feedforward, c.dropout)?;
        let queries = ObjectQuerySet::new(store.normal("queries".into(), &[c.n_queries, c.d_model], 1.0)?);
        let mut decoder =
            |name: &str| Decoder::new(&mut store, name, c.n_decoder_layers, c.d_model, c.n_heads, c.dim_feedforward, c.dropout);
        let center = decoder("decoder_center")?;
        let top_left = decoder("decoder_top_left")?;
        let heads = Heads::new(&mut store, c)?;
        Ok(Self { config: c.clone(), store, backbone, encoder, queries, center, top_left, heads })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn queries(&self) -> &ObjectQuerySet {
        &self.queries
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn decoder(&self, role: Role) -> &Decoder {
        match role {
            Role::Center => &self.center,
            Role::TopLeft => &self.top_left,
        }
    }

    /// Reference point of each query row for `role`.
    pub fn spatial_query(&self, role: Role, queries: &Tensor) -> Result<Tensor> {
        Ok(self.decoder(role).spatial_query(queries)?)
    }

    /// Backbone and encoder: `(memory (B, N, d), pos (N, d))`.
    pub fn encode(&self, images: &Tensor, ctx: &mut ForwardCtx) -> Result<(Tensor, Tensor)> {
        let f = self.backbone.forward(images)?;
        let memory = self.encoder.forward(&f.tokens, &f.pos, ctx)?;
        Ok((memory, f.pos))
    }

    /// Both decoders over the same memory and query set.
    pub fn decode(
        &self,
        memory: &Tensor,
        pos: &Tensor,
        queries: &ObjectQuerySet,
        ctx: &mut ForwardCtx,
    ) -> Result<(DecoderTrace, DecoderTrace)> {
        let c = self.center.forward(memory, pos, queries.embeddings(), ctx)?;
        let t = self.top_left.forward(memory, pos, queries.embeddings(), ctx)?;
        Ok((c, t))
    }

    pub fn forward(&self, images: &Tensor, ctx: &mut ForwardCtx) -> Result<PairDecoderOutput> {
        self.forward_with_queries(images, &self.queries, ctx)
    }

    /// Forward pass with an explicit query set in place of the learned one.
    pub fn forward_with_queries(&self, images: &Tensor, queries: &ObjectQuerySet, ctx: &mut ForwardCtx) -> Result<PairDecoderOutput> {
        let (memory, pos) = self.encode(images, ctx)?;
        let (c, t) = self.decode(&memory, &pos, queries, ctx)?;
        Ok(PairDecoderOutput {
            center: self.heads.forward(&c, Role::Center)?,
            top_left: self.heads.forward(&t, Role::TopLeft)?,
            query_ids: [queries.id(), queries.id()],
        })
    }

    /// Detections for one image, best class per query, no suppression.
    /// A query is kept when its score exceeds `score_threshold`; a
    /// non-positive threshold keeps every query.
    pub fn predict(&self, image: &RgbImage, score_threshold: f64, mode: &dyn BoxDecoder) -> Result<Vec<Detection>> {
        let x = image_to_tensor(image, self.device())?.unsqueeze(0)?;
        let out = self.forward(&x, &mut ForwardCtx::eval())?;
        Ok(detections_from_output(&out, 0, score_threshold, mode)?.into_iter().flatten().collect())
    }

    /// Copies every parameter of `other` into `self` by name.
    pub fn load_params_from(&self, other: &PairDetr) -> Result<()> {
        for (name, var) in self.store.vars() {
            let src = other.store.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            var.set(src.as_tensor())?;
        }
        Ok(())
    }
}

/// Final-layer detections of batch element `b`: for each query, the best
/// class and its sigmoid score, or `None` when filtered by the threshold.
pub fn detections_from_output(
    out: &PairDecoderOutput,
    b: usize,
    score_threshold: f64,
    mode: &dyn BoxDecoder,
) -> Result<Vec<Option<Detection>>> {
    let logits = out.center.last_logits().get(b)?.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
    let boxes = out.center.last_boxes().get(b)?.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
    let points = out.top_left.last_boxes().get(b)?.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
    let mut dets = Vec::with_capacity(logits.len());
    for q in 0..logits.len() {
        let (class_id, logit) = logits[q]
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
        let score = 1.0 / (1.0 + (-logit).exp());
        if score_threshold > 0.0 && score <= score_threshold {
            dets.push(None);
            continue;
        }
        let c = &boxes[q];
        let pair = KeypointPair::new(Point::new(c[0], c[1]), Point::new(points[q][0], points[q][1]), Some((c[2], c[3])));
        let bbox = box_from_prediction(&pair, mode)?;
        dets.push(Some(Detection { bbox, class_id, score }));
    }
    Ok(dets)
}
