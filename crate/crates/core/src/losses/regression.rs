//! L1 + GIoU box regression.

use candle_core::Tensor;

use crate::geometry::{giou, BoxCXCYWH};

/// `λ_l1·Σ|pred − gt| + λ_giou·(1 − GIoU(pred, gt))`.
pub fn box_regression_loss(pred: &BoxCXCYWH, gt: &BoxCXCYWH, l1_weight: f64, giou_weight: f64) -> f64 {
    let l1: f64 = pred.to_array().iter().zip(gt.to_array()).map(|(a, b)| (a - b).abs()).sum();
    l1_weight * l1 + giou_weight * (1.0 - giou(&pred.to_corners(), &gt.to_corners()))
}

/// Row-wise `Σ|a − b|` over the last axis of two `(M, k)` tensors.
pub fn l1_tensor(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    (a - b)?.abs()?.sum(1)
}

fn corners(b: &Tensor) -> candle_core::Result<[Tensor; 4]> {
    let c = b.narrow(1, 0, 2)?;
    let half = (b.narrow(1, 2, 2)? * 0.5)?;
    let lo = (&c - &half)?;
    let hi = (&c + &half)?;
    Ok([lo.narrow(1, 0, 1)?, lo.narrow(1, 1, 1)?, hi.narrow(1, 0, 1)?, hi.narrow(1, 1, 1)?])
}

/// Row-wise GIoU of two `(M, 4)` center-format tensors; returns `(M,)`.
///
/// Assumes non-degenerate hulls (a floor of 1e-12 guards the divisions).
pub fn giou_tensor(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    let [ax0, ay0, ax1, ay1] = corners(a)?;
    let [bx0, by0, bx1, by1] = corners(b)?;
    let area = |x0: &Tensor, y0: &Tensor, x1: &Tensor, y1: &Tensor| -> candle_core::Result<Tensor> {
        (x1 - x0)?.relu()? * (y1 - y0)?.relu()?
    };
    let area_a = area(&ax0, &ay0, &ax1, &ay1)?;
    let area_b = area(&bx0, &by0, &bx1, &by1)?;
    let inter = area(&ax0.maximum(&bx0)?, &ay0.maximum(&by0)?, &ax1.minimum(&bx1)?, &ay1.minimum(&by1)?)?;
    let union = ((area_a + area_b)? - &inter)?;
    let hull = area(&ax0.minimum(&bx0)?, &ay0.minimum(&by0)?, &ax1.maximum(&bx1)?, &ay1.maximum(&by1)?)?;
    let iou = (inter / union.maximum(1e-12)?)?;
    let penalty = ((&hull - &union)? / hull.maximum(1e-12)?)?;
    (iou - penalty)?.squeeze(1)
}

/// Row-wise loss over `(M, 4)` predictions and targets; returns `(M,)`.
pub fn box_regression_loss_tensor(
    pred: &Tensor,
    gt: &Tensor,
    l1_weight: f64,
    giou_weight: f64,
) -> candle_core::Result<Tensor> {
    let l1 = l1_tensor(pred, gt)?.affine(l1_weight, 0.0)?;
    let g = giou_tensor(pred, gt)?.affine(-giou_weight, giou_weight)?;
    l1 + g
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use candle_core::Device;

    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BoxCXCYWH {
        BoxCXCYWH::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn identical_is_zero() {
        let x = b(0.4, 0.6, 0.2, 0.3);
        assert_abs_diff_eq!(box_regression_loss(&x, &x, 5.0, 2.0), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn pure_l1() {
        let (p, g) = (b(0.4, 0.6, 0.2, 0.3), b(0.5, 0.5, 0.1, 0.4));
        assert_abs_diff_eq!(box_regression_loss(&p, &g, 1.0, 0.0), 0.1 + 0.1 + 0.1 + 0.1, epsilon = 1e-12);
    }

    #[test]
    fn nested_worked_example() {
        // IoU = 0.25 and the hull equals the union, so GIoU = 0.25
        let l = box_regression_loss(&b(0.5, 0.5, 0.5, 0.5), &b(0.5, 0.5, 1.0, 1.0), 5.0, 2.0);
        assert_abs_diff_eq!(l, 5.0 * 1.0 + 2.0 * (1.0 - 0.25), epsilon = 1e-12);
    }

    #[test]
    fn tensor_matches_scalar() {
        let preds = [b(0.4, 0.6, 0.2, 0.3), b(0.5, 0.5, 0.5, 0.5), b(0.1, 0.2, 0.1, 0.1)];
        let gts = [b(0.5, 0.5, 0.1, 0.4), b(0.5, 0.5, 1.0, 1.0), b(0.8, 0.9, 0.2, 0.1)];
        let dev = Device::Cpu;
        let t = |v: &[BoxCXCYWH]| {
            Tensor::from_vec(v.iter().flat_map(|x| x.to_array()).collect::<Vec<_>>(), (v.len(), 4), &dev).unwrap()
        };
        let out = box_regression_loss_tensor(&t(&preds), &t(&gts), 5.0, 2.0).unwrap().to_vec1::<f64>().unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(out[i], box_regression_loss(&preds[i], &gts[i], 5.0, 2.0), epsilon = 1e-12);
        }
    }
}
