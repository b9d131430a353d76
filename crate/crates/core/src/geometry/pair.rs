//! Width/height recovery from a (center, top-left) keypoint pair.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use candle_core::Tensor;

use super::{BoxCXCYWH, Point};
use crate::error::{Error, Result};
use crate::registry::{Named, Registry};

static CLAMPED_PAIRS: AtomicU64 = AtomicU64::new(0);

/// Number of pair conversions so far whose top-left point lay below/right of
/// the center and had to be clamped to a zero extent.
pub fn clamped_pair_count() -> u64 {
    CLAMPED_PAIRS.load(Ordering::Relaxed)
}

/// Matched center and top-left keypoints, plus the center decoder's own
/// extent estimate when it produces one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointPair {
    pub center: Point,
    pub top_left: Point,
    pub center_wh: Option<(f64, f64)>,
}

impl KeypointPair {
    pub fn new(center: Point, top_left: Point, center_wh: Option<(f64, f64)>) -> Self {
        Self { center, top_left, center_wh }
    }

    /// The exact pair for a ground-truth box.
    pub fn from_box(b: &BoxCXCYWH) -> Self {
        Self::new(b.center(), b.top_left(), Some((b.w, b.h)))
    }
}

/// `(2·(x_c − x_tl), 2·(y_c − y_tl))`, clamped at zero.
pub fn wh_from_pair(p: &KeypointPair) -> (f64, f64) {
    let dw = 2.0 * (p.center.x - p.top_left.x);
    let dh = 2.0 * (p.center.y - p.top_left.y);
    if dw < 0.0 || dh < 0.0 {
        CLAMPED_PAIRS.fetch_add(1, Ordering::Relaxed);
    }
    (dw.max(0.0), dh.max(0.0))
}

/// Component-wise mean of the pair-derived extent and the center decoder's.
pub fn wh_averaged(p: &KeypointPair) -> Result<(f64, f64)> {
    let (wc, hc) = p.center_wh.ok_or(Error::MissingField { mode: "averaged".into(), field: "center_wh" })?;
    let (wp, hp) = wh_from_pair(p);
    Ok(((wp + wc) / 2.0, (hp + hc) / 2.0))
}

/// How a detection's width and height are obtained from the decoder outputs.
pub trait BoxDecoder: Named + Send + Sync {
    /// Whether the center decoder's `(w_c, h_c)` regression is consumed.
    fn uses_center_wh(&self) -> bool;

    /// Whether the pair-coordinate conversion is consumed.
    fn uses_pair(&self) -> bool;

    fn decode(&self, p: &KeypointPair) -> Result<BoxCXCYWH>;

    /// Batched form over `center: (N, 4)` rows `(cx, cy, w_c, h_c)` and
    /// `top_left: (N, 2)`; returns `(N, 4)` center-format boxes.
    fn decode_tensor(&self, center: &Tensor, top_left: &Tensor) -> candle_core::Result<Tensor>;
}

fn centered(p: &KeypointPair, (w, h): (f64, f64)) -> Result<BoxCXCYWH> {
    BoxCXCYWH::new(p.center.x, p.center.y, w, h)
}

fn pair_wh_tensor(center: &Tensor, top_left: &Tensor) -> candle_core::Result<Tensor> {
    (center.narrow(1, 0, 2)? - top_left)?.affine(2.0, 0.0)?.relu()
}

/// Extent regressed directly by the center decoder.
#[derive(Debug, Default, Clone, Copy)]
pub struct WhOnly;

/// Extent from the keypoint pair alone.
#[derive(Debug, Default, Clone, Copy)]
pub struct PairOnly;

/// Mean of the pair-derived and regressed extents.
#[derive(Debug, Default, Clone, Copy)]
pub struct Averaged;

impl Named for WhOnly {
    fn name(&self) -> &'static str {
        "wh_only"
    }
}

impl BoxDecoder for WhOnly {
    fn uses_center_wh(&self) -> bool {
        true
    }
    fn uses_pair(&self) -> bool {
        false
    }
    fn decode(&self, p: &KeypointPair) -> Result<BoxCXCYWH> {
        let wh = p.center_wh.ok_or(Error::MissingField { mode: self.name().into(), field: "center_wh" })?;
        centered(p, wh)
    }
    fn decode_tensor(&self, center: &Tensor, _top_left: &Tensor) -> candle_core::Result<Tensor> {
        Ok(center.clone())
    }
}

impl Named for PairOnly {
    fn name(&self) -> &'static str {
        "pair_only"
    }
}

impl BoxDecoder for PairOnly {
    fn uses_center_wh(&self) -> bool {
        false
    }
    fn uses_pair(&self) -> bool {
        true
    }
    fn decode(&self, p: &KeypointPair) -> Result<BoxCXCYWH> {
        centered(p, wh_from_pair(p))
    }
    fn decode_tensor(&self, center: &Tensor, top_left: &Tensor) -> candle_core::Result<Tensor> {
        Tensor::cat(&[center.narrow(1, 0, 2)?, pair_wh_tensor(center, top_left)?], 1)
    }
}

impl Named for Averaged {
    fn name(&self) -> &'static str {
        "averaged"
    }
}

impl BoxDecoder for Averaged {
    fn uses_center_wh(&self) -> bool {
        true
    }
    fn uses_pair(&self) -> bool {
        true
    }
    fn decode(&self, p: &KeypointPair) -> Result<BoxCXCYWH> {
        centered(p, wh_averaged(p)?)
    }
    fn decode_tensor(&self, center: &Tensor, top_left: &Tensor) -> candle_core::Result<Tensor> {
        let wh = ((pair_wh_tensor(center, top_left)? + center.narrow(1, 2, 2)?)? * 0.5)?;
        Tensor::cat(&[center.narrow(1, 0, 2)?, wh], 1)
    }
}

/// All built-in box decoders, keyed by name.
pub fn box_decoders() -> Registry<dyn BoxDecoder> {
    let mut reg: Registry<dyn BoxDecoder> = Registry::new("box mode");
    reg.register(Arc::new(WhOnly)).register(Arc::new(PairOnly)).register(Arc::new(Averaged));
    reg
}

pub fn box_from_prediction(p: &KeypointPair, mode: &dyn BoxDecoder) -> Result<BoxCXCYWH> {
    mode.decode(p)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use candle_core::Device;
    use proptest::prelude::*;

    use super::*;

    fn pair(c: (f64, f64), tl: (f64, f64), wh: Option<(f64, f64)>) -> KeypointPair {
        KeypointPair::new(Point::new(c.0, c.1), Point::new(tl.0, tl.1), wh)
    }

    #[test]
    fn pair_extent_examples() {
        let (w, h) = wh_from_pair(&pair((0.5, 0.5), (0.25, 0.3), None));
        assert_abs_diff_eq!(w, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(h, 0.4, epsilon = 1e-12);
        assert_eq!(wh_from_pair(&pair((0.4, 0.4), (0.4, 0.4), None)), (0.0, 0.0));
        let (w, h) = wh_from_pair(&pair((0.6, 0.6), (0.45, 0.5), None));
        assert_abs_diff_eq!(w, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(h, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn inverted_pair_clamps_and_counts() {
        let before = clamped_pair_count();
        let (w, h) = wh_from_pair(&pair((0.3, 0.3), (0.4, 0.2), None));
        assert_eq!(w, 0.0);
        assert_abs_diff_eq!(h, 0.2, epsilon = 1e-12);
        assert!(clamped_pair_count() > before);
    }

    #[test]
    fn averaged_examples() {
        // pair extent (0.4, 0.4) agreeing with the regressed extent
        let p = pair((0.5, 0.5), (0.3, 0.3), Some((0.4, 0.4)));
        let (w, h) = wh_averaged(&p).unwrap();
        assert_abs_diff_eq!(w, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(h, 0.4, epsilon = 1e-12);
        // pair extent (0.2, 0.2) against (0.4, 0.6)
        let p = pair((0.5, 0.5), (0.4, 0.4), Some((0.4, 0.6)));
        let (w, h) = wh_averaged(&p).unwrap();
        assert_abs_diff_eq!(w, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(h, 0.4, epsilon = 1e-12);
        assert!(matches!(wh_averaged(&pair((0.5, 0.5), (0.4, 0.4), None)), Err(Error::MissingField { .. })));
    }

    #[test]
    fn decoder_examples() {
        let reg = box_decoders();
        let wh = reg.get("wh_only").unwrap();
        let b = box_from_prediction(&pair((0.5, 0.5), (0.1, 0.1), Some((1.0, 1.0))), wh.as_ref()).unwrap();
        assert_eq!(b.to_array(), [0.5, 0.5, 1.0, 1.0]);
        assert!(wh.decode(&pair((0.5, 0.5), (0.1, 0.1), None)).is_err());

        let po = reg.get("pair_only").unwrap();
        let b = box_from_prediction(&pair((0.5, 0.5), (0.0, 0.0), None), po.as_ref()).unwrap();
        assert_eq!(b.to_array(), [0.5, 0.5, 1.0, 1.0]);

        let av = reg.get("averaged").unwrap();
        let p = pair((0.5, 0.4), (0.35, 0.3), Some((0.1, 0.5)));
        let b = av.decode(&p).unwrap();
        // composition of the two extents computed by hand: pair (0.3, 0.2)
        assert_abs_diff_eq!(b.w, (0.3 + 0.1) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.h, (0.2 + 0.5) / 2.0, epsilon = 1e-12);
        assert_eq!((b.cx, b.cy), (0.5, 0.4));
        assert!(reg.get("corner").is_err());
    }

    #[test]
    fn tensor_decode_matches_scalar() {
        let dev = Device::Cpu;
        let center = Tensor::new(&[[0.5f64, 0.4, 0.1, 0.5], [0.2, 0.7, 0.3, 0.3]], &dev).unwrap();
        let tl = Tensor::new(&[[0.35f64, 0.3], [0.3, 0.6]], &dev).unwrap();
        let reg = box_decoders();
        for name in reg.names() {
            let d = reg.get(name).unwrap();
            let rows = d.decode_tensor(&center, &tl).unwrap().to_vec2::<f64>().unwrap();
            let c = center.to_vec2::<f64>().unwrap();
            let t = tl.to_vec2::<f64>().unwrap();
            for i in 0..2 {
                let p = pair((c[i][0], c[i][1]), (t[i][0], t[i][1]), Some((c[i][2], c[i][3])));
                let b = d.decode(&p).unwrap().to_array();
                for k in 0..4 {
                    assert_abs_diff_eq!(rows[i][k], b[k], epsilon = 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn pair_round_trip(cx in 0.0f64..1.0, cy in 0.0f64..1.0, w in 0.0f64..1.0, h in 0.0f64..1.0) {
            let b = BoxCXCYWH::new(cx, cy, w, h).unwrap();
            let (rw, rh) = wh_from_pair(&KeypointPair::from_box(&b));
            prop_assert!((rw - w).abs() < 1e-9 && (rh - h).abs() < 1e-9);
        }

        #[test]
        fn averaged_lies_between(cx in 0.2f64..0.8, cy in 0.2f64..0.8, dx in 0.0f64..0.2, dy in 0.0f64..0.2,
                                 wc in 0.0f64..1.0, hc in 0.0f64..1.0) {
            let p = pair((cx, cy), (cx - dx, cy - dy), Some((wc, hc)));
            let a = Averaged.decode(&p).unwrap();
            let po = PairOnly.decode(&p).unwrap();
            let wo = WhOnly.decode(&p).unwrap();
            for (v, x, y) in [(a.w, po.w, wo.w), (a.h, po.h, wo.h)] {
                prop_assert!(v >= x.min(y) - 1e-12 && v <= x.max(y) + 1e-12);
            }
        }
    }
}
