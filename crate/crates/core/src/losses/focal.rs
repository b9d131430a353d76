use candle_core::Tensor;
use serde::{Deserialize, Serialize};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalParams {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.alpha) && self.gamma >= 0.0 && self.gamma.is_finite()
    }
}

/// Focal loss of one binary decision with predicted probability `prob`.
pub fn focal_loss(prob: f64, is_positive: bool, p: &FocalParams) -> f64 {
    let prob = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if is_positive {
        -p.alpha * (1.0 - prob).powf(p.gamma) * prob.ln()
    } else {
        -(1.0 - p.alpha) * prob.powf(p.gamma) * (1.0 - prob).ln()
    }
}

/// Element-wise focal loss; `targets` holds 1 for positives and 0 otherwise.
pub fn focal_loss_tensor(prob: &Tensor, targets: &Tensor, p: &FocalParams) -> candle_core::Result<Tensor> {
    let prob = prob.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let one_minus = prob.affine(-1.0, 1.0)?;
    let pos = (one_minus.powf(p.gamma)? * prob.log()?)?.affine(-p.alpha, 0.0)?;
    let neg = (prob.powf(p.gamma)? * one_minus.log()?)?.affine(-(1.0 - p.alpha), 0.0)?;
    let not_t = targets.affine(-1.0, 1.0)?;
    (targets * pos)? + (not_t * neg)?
}
