//! Bipartite matching of decoder queries to ground-truth objects.

mod hungarian;
mod strategy;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Target;
use crate::error::{Error, Result};
use crate::geometry::{giou, BoxDecoder, KeypointPair, Point};
use crate::losses::FocalParams;
use crate::model::PairDecoderOutput;

pub use hungarian::hungarian;
pub use strategy::{
    match_strategies, resolve_match_strategy, MatchStrategy, SeparateHeadsBothCosts, SharedHeadBothCosts,
    SharedHeadCenterCost,
};

/// Trade-off weights of the matching cost (and, by default, the loss).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { class: 2.0, l1: 5.0, giou: 2.0 }
    }
}

/// Query × ground-truth cost table, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    queries: usize,
    gts: usize,
    data: Vec<f64>,
    weights: CostWeights,
}

impl CostMatrix {
    pub fn from_rows(queries: usize, gts: usize, data: Vec<f64>) -> Result<Self> {
        Self::with_weights(queries, gts, data, CostWeights::default())
    }

    pub fn with_weights(queries: usize, gts: usize, data: Vec<f64>, weights: CostWeights) -> Result<Self> {
        if queries < gts {
            return Err(Error::TooFewQueries { queries, gts });
        }
        assert_eq!(data.len(), queries * gts, "cost matrix data has wrong length");
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cost entry ({}, {})", i / gts.max(1), i % gts.max(1))));
        }
        Ok(Self { queries, gts, data, weights })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn gts(&self) -> usize {
        self.gts
    }

    pub fn get(&self, query: usize, gt: usize) -> f64 {
        self.data[query * self.gts + gt]
    }

    pub fn weights(&self) -> &CostWeights {
        &self.weights
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Injective query → ground-truth pairs, one per ground-truth object,
/// ordered by ground-truth index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchAssignment {
    pairs: Vec<(usize, usize)>,
}

impl MatchAssignment {
    pub fn new(mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_by_key(|p| p.1);
        Self { pairs }
    }

    /// `(query_index, gt_index)` pairs.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn query_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn gt_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    /// Summed cost in ground-truth order.
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost.get(q, g)).sum()
    }
}

/// One image's per-query decoder outputs for a single decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPredictions {
    /// `Q × C` center-decoder class logits.
    pub center_logits: Vec<Vec<f64>>,
    /// `Q × C` top-left-decoder class logits (from the shared or its own head).
    pub top_left_logits: Vec<Vec<f64>>,
    /// `Q` rows of `(cx, cy, w_c, h_c)`.
    pub center_boxes: Vec<[f64; 4]>,
    /// `Q` rows of `(x_tl, y_tl)`.
    pub top_left_points: Vec<[f64; 2]>,
}

impl QueryPredictions {
    pub fn len(&self) -> usize {
        self.center_boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center_boxes.is_empty()
    }

    pub fn keypoint_pair(&self, q: usize) -> KeypointPair {
        let c = self.center_boxes[q];
        let t = self.top_left_points[q];
        KeypointPair::new(Point::new(c[0], c[1]), Point::new(t[0], t[1]), Some((c[2], c[3])))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Focal-style classification cost of predicting probability `prob` for the
/// ground-truth class: positive focal term minus negative focal term.
pub fn focal_class_cost(prob: f64, p: &FocalParams) -> f64 {
    let pos = p.alpha * (1.0 - prob).powf(p.gamma) * -(prob + 1e-8).ln();
    let neg = (1.0 - p.alpha) * prob.powf(p.gamma) * -(1.0 - prob + 1e-8).ln();
    pos - neg
}

/// Box-side cost terms shared by matching and the regression loss: the
/// center decoder's L1 (4 components when its extent is used, else the
/// center only) plus the top-left decoder's L1 against the ground-truth corner.
pub fn pair_l1(center: &[f64; 4], top_left: &[f64; 2], gt: &Target, mode: &dyn BoxDecoder) -> f64 {
    let g = gt.bbox.to_array();
    let k = if mode.uses_center_wh() { 4 } else { 2 };
    let center_l1: f64 = (0..k).map(|i| (center[i] - g[i]).abs()).sum();
    let corner = gt.bbox.top_left();
    center_l1 + (top_left[0] - corner.x).abs() + (top_left[1] - corner.y).abs()
}

/// Builds the `Q × G` matching cost for one image.
pub fn build_cost_matrix(
    preds: &QueryPredictions,
    gts: &[Target],
    strategy: &dyn MatchStrategy,
    mode: &dyn BoxDecoder,
    weights: &CostWeights,
    focal: &FocalParams,
) -> Result<CostMatrix> {
    let q = preds.len();
    if q < gts.len() {
        return Err(Error::TooFewQueries { queries: q, gts: gts.len() });
    }
    let check = |rows: &[Vec<f64>], what: &str| -> Result<()> {
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    };
    check(&preds.center_logits, "center class logits")?;
    if strategy.uses_top_left_class_cost() {
        check(&preds.top_left_logits, "top-left class logits")?;
    }

    let mut data = Vec::with_capacity(q * gts.len());
    for query in 0..q {
        let fused = mode.decode(&preds.keypoint_pair(query))?.to_corners();
        for gt in gts {
            let mut class_cost = focal_class_cost(sigmoid(preds.center_logits[query][gt.class_id]), focal);
            if strategy.uses_top_left_class_cost() {
                class_cost += focal_class_cost(sigmoid(preds.top_left_logits[query][gt.class_id]), focal);
            }
            let l1 = pair_l1(&preds.center_boxes[query], &preds.top_left_points[query], gt, mode);
            let g = giou(&fused, &gt.bbox.to_corners());
            data.push(weights.class * class_cost + weights.l1 * l1 + weights.giou * (1.0 - g));
        }
    }
    CostMatrix::with_weights(q, gts.len(), data, *weights)
}

/// Per-query predictions of layer `layer` for batch element `b`.
pub fn predictions_from_output(out: &PairDecoderOutput, layer: usize, b: usize) -> Result<QueryPredictions> {
    let rows = |t: &Tensor| -> Result<Vec<Vec<f64>>> { Ok(t.get(b)?.to_dtype(DType::F64)?.to_vec2::<f64>()?) };
    let center_boxes = rows(&out.center.boxes[layer])?.into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect();
    let top_left_points = rows(&out.top_left.boxes[layer])?.into_iter().map(|r| [r[0], r[1]]).collect();
    Ok(QueryPredictions {
        center_logits: rows(&out.center.logits[layer])?,
        top_left_logits: rows(&out.top_left.logits[layer])?,
        center_boxes,
        top_left_points,
    })
}

/// Hungarian assignments for every decoder layer (or just the last when
/// `all_layers` is false) and every image: `result[l][b]`. Both decoders
/// share each assignment since they share queries.
pub fn match_output(
    out: &PairDecoderOutput,
    targets: &[Vec<Target>],
    strategy: &dyn MatchStrategy,
    mode: &dyn BoxDecoder,
    weights: &CostWeights,
    focal: &FocalParams,
    all_layers: bool,
) -> Result<Vec<Vec<MatchAssignment>>> {
    let n = out.center.n_layers();
    let layers: Vec<usize> = if all_layers { (0..n).collect() } else { vec![n - 1] };
    layers
        .into_iter()
        .map(|l| {
            targets
                .iter()
                .enumerate()
                .map(|(b, t)| {
                    if t.is_empty() {
                        return Ok(MatchAssignment::default());
                    }
                    let preds = predictions_from_output(out, l, b)?;
                    Ok(hungarian(&build_cost_matrix(&preds, t, strategy, mode, weights, focal)?))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::geometry::{box_decoders, BoxCXCYWH};

    fn random_preds(rng: &mut impl Rng, q: usize, c: usize) -> QueryPredictions {
        QueryPredictions {
            center_logits: (0..q).map(|_| (0..c).map(|_| rng.random_range(-4.0..4.0)).collect()).collect(),
            top_left_logits: (0..q).map(|_| (0..c).map(|_| rng.random_range(-4.0..4.0)).collect()).collect(),
            center_boxes: (0..q)
                .map(|_| {
                    [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.05..0.4), rng.random_range(0.05..0.4)]
                })
                .collect(),
            top_left_points: (0..q).map(|_| [rng.random_range(0.0..0.6), rng.random_range(0.0..0.6)]).collect(),
        }
    }

    fn targets() -> Vec<Target> {
        vec![
            Target { bbox: BoxCXCYWH::new(0.3, 0.4, 0.2, 0.3).unwrap(), class_id: 1 },
            Target { bbox: BoxCXCYWH::new(0.7, 0.6, 0.3, 0.2).unwrap(), class_id: 2 },
        ]
    }

    #[test]
    fn empty_ground_truth() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let preds = random_preds(&mut rng, 4, 3);
        let s = resolve_match_strategy("3").unwrap();
        let m = build_cost_matrix(&preds, &[], s.as_ref(), &crate::geometry::Averaged, &CostWeights::default(), &FocalParams::default())
            .unwrap();
        assert_eq!((m.queries(), m.gts()), (4, 0));
        assert!(hungarian(&m).is_empty());
    }

    #[test]
    fn too_few_queries() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let preds = random_preds(&mut rng, 1, 3);
        let s = resolve_match_strategy("3").unwrap();
        let err = build_cost_matrix(&preds, &targets(), s.as_ref(), &crate::geometry::Averaged, &CostWeights::default(), &FocalParams::default());
        assert!(matches!(err, Err(Error::TooFewQueries { queries: 1, gts: 2 })));
    }

    #[test]
    fn non_finite_logits() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut preds = random_preds(&mut rng, 3, 3);
        preds.center_logits[1][0] = f64::NAN;
        let s = resolve_match_strategy("3").unwrap();
        let err = build_cost_matrix(&preds, &targets(), s.as_ref(), &crate::geometry::Averaged, &CostWeights::default(), &FocalParams::default());
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn uniform_top_left_probabilities_shift_columns() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut preds = random_preds(&mut rng, 5, 3);
        preds.top_left_logits = vec![vec![0.3; 3]; 5];
        let (w, f) = (CostWeights::default(), FocalParams::default());
        let mode = crate::geometry::Averaged;
        let two = build_cost_matrix(&preds, &targets(), resolve_match_strategy("2").unwrap().as_ref(), &mode, &w, &f).unwrap();
        let three = build_cost_matrix(&preds, &targets(), resolve_match_strategy("3").unwrap().as_ref(), &mode, &w, &f).unwrap();
        for g in 0..2 {
            let shift = two.get(0, g) - three.get(0, g);
            for q in 0..5 {
                assert_abs_diff_eq!(two.get(q, g) - three.get(q, g), shift, epsilon = 1e-12);
            }
        }
        assert_eq!(hungarian(&two), hungarian(&three));
    }

    #[test]
    fn entries_match_straight_line_recomputation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let preds = random_preds(&mut rng, 3, 4);
        let gts = targets();
        let (w, f) = (CostWeights { class: 2.0, l1: 5.0, giou: 2.0 }, FocalParams { alpha: 0.25, gamma: 2.0 });
        let decoders = box_decoders();
        for strategy in ["1", "2", "3"] {
            for mode_name in ["wh_only", "pair_only", "averaged"] {
                let s = resolve_match_strategy(strategy).unwrap();
                let mode = decoders.get(mode_name).unwrap();
                let m = build_cost_matrix(&preds, &gts, s.as_ref(), mode.as_ref(), &w, &f).unwrap();
                for q in 0..3 {
                    for (gi, gt) in gts.iter().enumerate() {
                        let expected = oracle_entry(&preds, q, gt, strategy, mode_name);
                        assert_abs_diff_eq!(m.get(q, gi), expected, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    // independent re-derivation with literal constants
    fn oracle_entry(p: &QueryPredictions, q: usize, gt: &Target, strategy: &str, mode: &str) -> f64 {
        let cost = |logit: f64| {
            let prob = 1.0 / (1.0 + (-logit).exp());
            0.25 * (1.0 - prob).powi(2) * -(prob + 1e-8).ln() - 0.75 * prob.powi(2) * -(1.0 - prob + 1e-8).ln()
        };
        let mut cls = cost(p.center_logits[q][gt.class_id]);
        if strategy != "3" {
            cls += cost(p.top_left_logits[q][gt.class_id]);
        }
        let [cx, cy, wc, hc] = p.center_boxes[q];
        let [tx, ty] = p.top_left_points[q];
        let b = gt.bbox;
        let (gx0, gy0) = (b.cx - b.w / 2.0, b.cy - b.h / 2.0);
        let mut l1 = (cx - b.cx).abs() + (cy - b.cy).abs() + (tx - gx0).abs() + (ty - gy0).abs();
        if mode != "pair_only" {
            l1 += (wc - b.w).abs() + (hc - b.h).abs();
        }
        let (pw, ph) = ((2.0 * (cx - tx)).max(0.0), (2.0 * (cy - ty)).max(0.0));
        let (w, h) = match mode {
            "wh_only" => (wc, hc),
            "pair_only" => (pw, ph),
            _ => ((pw + wc) / 2.0, (ph + hc) / 2.0),
        };
        let (ax0, ay0, ax1, ay1) = (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
        let (bx0, by0, bx1, by1) = (gx0, gy0, b.cx + b.w / 2.0, b.cy + b.h / 2.0);
        let inter = (ax1.min(bx1) - ax0.max(bx0)).max(0.0) * (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let union = w * h + b.w * b.h - inter;
        let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
        let g = inter / union - (hull - union) / hull;
        2.0 * cls + 5.0 * l1 + 2.0 * (1.0 - g)
    }
}
