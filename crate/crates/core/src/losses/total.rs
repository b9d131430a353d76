//! The joint objective over both decoders.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::{focal_loss_tensor, giou_tensor, l1_tensor, nt_xent_tensor, FocalParams};
use crate::data::Target;
use crate::error::{Error, Result};
use crate::geometry::BoxDecoder;
use crate::matching::MatchAssignment;
use crate::model::{sigmoid, PairDecoderOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub class_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub contrastive_weight: f64,
    pub temperature: f64,
    pub focal: FocalParams,
    /// Couple the decoders with the contrastive term.
    pub contrastive: bool,
    /// Restrict the contrastive batch to matched queries.
    pub contrastive_matched_only: bool,
    /// Also apply the contrastive term to intermediate decoder layers.
    pub contrastive_aux_layers: bool,
    /// Supervise every decoder layer, not just the last.
    pub aux_loss: bool,
    /// Train the classification head on top-left decoder outputs too.
    pub top_left_class_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            class_weight: 2.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
            contrastive_weight: 1.0,
            temperature: 0.5,
            focal: FocalParams::default(),
            contrastive: true,
            contrastive_matched_only: false,
            contrastive_aux_layers: false,
            aux_loss: true,
            top_left_class_loss: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.class_weight, self.l1_weight, self.giou_weight, self.contrastive_weight];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config { path: "loss".into(), message: "weights must be finite and non-negative".into() });
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config { path: "loss.temperature".into(), message: "must be positive".into() });
        }
        if !self.focal.is_valid() {
            return Err(Error::Config { path: "loss.focal".into(), message: "alpha in [0, 1], gamma >= 0".into() });
        }
        Ok(())
    }
}

/// Per-term values; the five terms sum to `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_center: f64,
    pub cls_top_left: f64,
    pub box_center: f64,
    pub box_top_left: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 5] {
        [self.cls_center, self.cls_top_left, self.box_center, self.box_top_left, self.contrastive]
    }
}

pub struct TotalLoss {
    /// Differentiable scalar.
    pub loss: Tensor,
    pub breakdown: LossBreakdown,
}

/// `matches[l][b]` pairs queries of layer `l` with targets of image `b`.
/// With auxiliary losses every layer needs an assignment, otherwise only
/// the last entry is read.
pub fn total_loss(
    out: &PairDecoderOutput,
    targets: &[Vec<Target>],
    matches: &[Vec<MatchAssignment>],
    mode: &dyn BoxDecoder,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    let q_center = out.center.reference.dim(1)?;
    let q_tl = out.top_left.reference.dim(1)?;
    if q_center != q_tl {
        return Err(Error::QueryMismatch { center: q_center, top_left: q_tl });
    }
    let n_layers = out.center.n_layers();
    if out.top_left.n_layers() != n_layers {
        return Err(Error::InvalidBatch(format!("{} vs {} decoder layers", n_layers, out.top_left.n_layers())));
    }
    let batch = out.batch_size();
    if targets.len() != batch {
        return Err(Error::InvalidBatch(format!("{} target lists for batch of {batch}", targets.len())));
    }
    let layers: Vec<usize> = if cfg.aux_loss { (0..n_layers).collect() } else { vec![n_layers - 1] };
    if matches.len() < layers.len() || matches.iter().any(|m| m.len() != batch) {
        return Err(Error::InvalidBatch(format!("{} match layers for {} supervised layers", matches.len(), layers.len())));
    }
    let match_offset = matches.len() - layers.len();

    let device = out.center.reference.device().clone();
    let dtype = out.center.reference.dtype();
    let num_boxes = targets.iter().map(Vec::len).sum::<usize>().max(1) as f64;
    let zero = || Tensor::zeros((), dtype, &device);
    let mut terms = [zero()?, zero()?, zero()?, zero()?, zero()?];

    for (k, &l) in layers.iter().enumerate() {
        let assign = &matches[match_offset + k];
        let (cls_c, cls_t, box_c, box_t) = layer_losses(out, targets, assign, l, mode, cfg, num_boxes)?;
        terms[0] = (&terms[0] + cls_c)?;
        if let Some(t) = cls_t {
            terms[1] = (&terms[1] + t)?;
        }
        if let Some((c, t)) = box_c.zip(box_t) {
            terms[2] = (&terms[2] + c)?;
            terms[3] = (&terms[3] + t)?;
        }
        let contrast_here = cfg.contrastive && (l + 1 == n_layers || cfg.contrastive_aux_layers);
        if contrast_here {
            if let Some(c) = contrastive_term(out, targets, assign, l, cfg)? {
                terms[4] = (&terms[4] + c)?;
            }
        }
    }

    let loss = terms.iter().skip(1).try_fold(terms[0].clone(), |acc, t| acc + t)?;
    let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let breakdown = LossBreakdown {
        cls_center: v(&terms[0])?,
        cls_top_left: v(&terms[1])?,
        box_center: v(&terms[2])?,
        box_top_left: v(&terms[3])?,
        contrastive: v(&terms[4])?,
        total: v(&loss)?,
    };
    Ok(TotalLoss { loss, breakdown })
}

type LayerTerms = (Tensor, Option<Tensor>, Option<Tensor>, Option<Tensor>);

fn layer_losses(
    out: &PairDecoderOutput,
    targets: &[Vec<Target>],
    assign: &[MatchAssignment],
    l: usize,
    mode: &dyn BoxDecoder,
    cfg: &LossConfig,
    num_boxes: f64,
) -> Result<LayerTerms> {
    let logits_c = &out.center.logits[l];
    let (b, q, c) = logits_c.dims3()?;
    let device = logits_c.device();
    let dtype = logits_c.dtype();

    let mut onehot = vec![0f32; b * q * c];
    let mut flat_idx = Vec::new();
    let mut gt_boxes = Vec::new();
    for (bi, (a, t)) in assign.iter().zip(targets).enumerate() {
        for &(query, gt) in a.pairs() {
            let target = t.get(gt).ok_or_else(|| Error::InvalidBatch(format!("image {bi}: match to missing target {gt}")))?;
            if query >= q || target.class_id >= c {
                return Err(Error::InvalidBatch(format!("image {bi}: query {query} / class {} out of range", target.class_id)));
            }
            onehot[(bi * q + query) * c + target.class_id] = 1.0;
            flat_idx.push((bi * q + query) as u32);
            gt_boxes.extend(target.bbox.to_array());
        }
    }
    let onehot = Tensor::from_vec(onehot, (b, q, c), device)?.to_dtype(dtype)?;
    let class_term = |logits: &Tensor| -> Result<Tensor> {
        let f = focal_loss_tensor(&sigmoid(logits)?, &onehot, &cfg.focal)?.sum_all()?;
        Ok((f * (cfg.class_weight / num_boxes))?)
    };
    let cls_c = class_term(logits_c)?;
    let cls_t = if cfg.top_left_class_loss { Some(class_term(&out.top_left.logits[l])?) } else { None };

    if flat_idx.is_empty() {
        return Ok((cls_c, cls_t, None, None));
    }
    let m = flat_idx.len();
    let idx = Tensor::from_vec(flat_idx, m, device)?;
    let gt = Tensor::from_vec(gt_boxes, (m, 4), device)?.to_dtype(dtype)?;
    let center = out.center.boxes[l].reshape((b * q, 4))?.index_select(&idx, 0)?;
    let tl = out.top_left.boxes[l].reshape((b * q, 2))?.index_select(&idx, 0)?;

    let k = if mode.uses_center_wh() { 4 } else { 2 };
    let l1_c = l1_tensor(&center.narrow(1, 0, k)?, &gt.narrow(1, 0, k)?)?;
    let fused = mode.decode_tensor(&center, &tl)?;
    let g = giou_tensor(&fused, &gt)?.affine(-1.0, 1.0)?;
    let box_c = ((l1_c.sum_all()? * cfg.l1_weight)? + (g.sum_all()? * cfg.giou_weight)?)?;
    let box_c = (box_c / num_boxes)?;

    let gt_tl = (gt.narrow(1, 0, 2)? - (gt.narrow(1, 2, 2)? * 0.5)?)?;
    let box_t = ((l1_tensor(&tl, &gt_tl)?.sum_all()? * cfg.l1_weight)? / num_boxes)?;
    Ok((cls_c, cls_t, Some(box_c), Some(box_t)))
}

/// Mean NT-Xent over images that have ground truth; rows are the center
/// projections followed by the top-left projections, query `q` pairing
/// with row `Q + q`.
fn contrastive_term(
    out: &PairDecoderOutput,
    targets: &[Vec<Target>],
    assign: &[MatchAssignment],
    l: usize,
    cfg: &LossConfig,
) -> Result<Option<Tensor>> {
    let pc = &out.center.projections[l];
    let pt = &out.top_left.projections[l];
    let q = pc.dim(1)?;
    let mut per_image = Vec::new();
    for (bi, (t, a)) in targets.iter().zip(assign).enumerate() {
        if t.is_empty() {
            continue;
        }
        let (zc, zt) = (pc.get(bi)?, pt.get(bi)?);
        let (zc, zt, n) = if cfg.contrastive_matched_only {
            let qi: Vec<u32> = a.query_indices().into_iter().map(|v| v as u32).collect();
            let n = qi.len();
            let idx = Tensor::from_vec(qi, n, pc.device())?;
            (zc.index_select(&idx, 0)?, zt.index_select(&idx, 0)?, n)
        } else {
            (zc, zt, q)
        };
        let z = Tensor::cat(&[zc, zt], 0)?;
        let partner: Vec<usize> = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
        per_image.push(nt_xent_tensor(&z, &partner, cfg.temperature)?);
    }
    if per_image.is_empty() {
        return Ok(None);
    }
    let count = per_image.len() as f64;
    let sum = Tensor::stack(&per_image, 0)?.sum_all()?;
    Ok(Some((sum * (cfg.contrastive_weight / count))?))
}
