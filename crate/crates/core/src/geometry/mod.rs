//! Normalized box representations and overlap measures.
//!
//! Boxes are stored as fractions of image width/height. The image origin is
//! the top-left pixel and `y` grows downward, so a box's top-left corner has
//! the smallest coordinates.

mod pair;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use pair::{
    box_decoders, box_from_prediction, clamped_pair_count, wh_averaged, wh_from_pair, Averaged, BoxDecoder,
    KeypointPair, PairOnly, WhOnly,
};

/// A 2-D point in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Center-format box: `(cx, cy)` center and `(w, h)` extent, all normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCXCYWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCXCYWH {
    /// Checked constructor: center in `[0,1]`, non-negative finite extent.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox(format!("({cx}, {cy}, {w}, {h})")))
        }
    }

    pub fn from_corners(c: Corners) -> Self {
        Self {
            cx: 0.5 * (c.x0 + c.x1),
            cy: 0.5 * (c.y0 + c.y1),
            w: c.x1 - c.x0,
            h: c.y1 - c.y0,
        }
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite())
            && unit(self.cx)
            && unit(self.cy)
            && self.w >= 0.0
            && self.h >= 0.0
    }

    pub fn to_corners(&self) -> Corners {
        box_to_corners(self)
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn top_left(&self) -> Point {
        Point::new(self.cx - 0.5 * self.w, self.cy - 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Corner-format box `(x0, y0, x1, y1)` with `x0 <= x1`, `y0 <= y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corners {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Corners {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    fn intersection_area(&self, other: &Corners) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    fn hull(&self, other: &Corners) -> Corners {
        Corners::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }
}

pub fn box_to_corners(b: &BoxCXCYWH) -> Corners {
    Corners {
        x0: b.cx - b.w / 2.0,
        y0: b.cy - b.h / 2.0,
        x1: b.cx + b.w / 2.0,
        y1: b.cy + b.h / 2.0,
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &Corners, b: &Corners) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU: `IoU - (hull - union) / hull`, in `[-1, 1]`.
///
/// A zero-area hull means both boxes collapse onto the same point or
/// segment; identical boxes then score 1 and anything else scores 0.
pub fn giou(a: &Corners, b: &Corners) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b).area();
    if hull <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    (iou - (hull - union) / hull).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn corners(b: (f64, f64, f64, f64)) -> Corners {
        Corners::new(b.0, b.1, b.2, b.3)
    }

    #[test]
    fn full_image_box() {
        let b = BoxCXCYWH::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(box_to_corners(&b), Corners::new(0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn point_box() {
        let b = BoxCXCYWH::new(0.5, 0.5, 0.0, 0.0).unwrap();
        assert_eq!(box_to_corners(&b), Corners::new(0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn corners_arithmetic() {
        let c = BoxCXCYWH::new(0.3, 0.4, 0.2, 0.6).unwrap().to_corners();
        assert_abs_diff_eq!(c.x0, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(c.y0, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(c.x1, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(c.y1, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn rejects_invalid() {
        assert!(BoxCXCYWH::new(0.5, 0.5, -0.1, 0.2).is_err());
        assert!(BoxCXCYWH::new(1.5, 0.5, 0.1, 0.2).is_err());
        assert!(BoxCXCYWH::new(f64::NAN, 0.5, 0.1, 0.2).is_err());
    }

    #[test]
    fn giou_worked_examples() {
        let unit = corners((0.0, 0.0, 1.0, 1.0));
        assert_eq!(giou(&unit, &unit), 1.0);
        assert_eq!(giou(&unit, &corners((1.0, 0.0, 2.0, 1.0))), 0.0);
        let g = giou(&corners((0.0, 0.0, 2.0, 2.0)), &corners((1.0, 1.0, 3.0, 3.0)));
        assert_abs_diff_eq!(g, 1.0 / 7.0 - 2.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn giou_degenerate() {
        let p = corners((0.5, 0.5, 0.5, 0.5));
        assert_eq!(giou(&p, &p), 1.0);
        // two distinct points: union 0, full hull penalty
        let q = corners((0.7, 0.9, 0.7, 0.9));
        assert_abs_diff_eq!(giou(&p, &q), -1.0, epsilon = 1e-12);
        // point inside a box: union = box area = hull
        let b = corners((0.0, 0.0, 1.0, 1.0));
        assert_abs_diff_eq!(giou(&p, &b), 0.0, epsilon = 1e-12);
    }

    fn arb_corners() -> impl Strategy<Value = Corners> {
        (-2.0f64..2.0, -2.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0)
            .prop_map(|(x, y, w, h)| Corners::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn giou_symmetric_and_bounded(a in arb_corners(), b in arb_corners()) {
            let g = giou(&a, &b);
            prop_assert_eq!(g, giou(&b, &a));
            prop_assert!((-1.0..=1.0).contains(&g));
            prop_assert!(g <= iou(&a, &b) + 1e-12);
        }

        #[test]
        fn giou_self_is_one(a in arb_corners()) {
            prop_assume!(a.area() > 1e-9);
            prop_assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn translation_invariance(a in arb_corners(), b in arb_corners(), dx in -1.0f64..1.0, dy in -1.0f64..1.0) {
            let (ta, tb) = (a.translate(dx, dy), b.translate(dx, dy));
            prop_assert!((iou(&a, &b) - iou(&ta, &tb)).abs() < 1e-9);
            prop_assert!((giou(&a, &b) - giou(&ta, &tb)).abs() < 1e-9);
        }

        #[test]
        fn nested_boxes_giou_equals_iou(a in arb_corners(), s in 0.0f64..1.0) {
            // b inside a: union equals the hull
            let b = Corners::new(a.x0, a.y0, a.x0 + s * a.width(), a.y0 + s * a.height());
            prop_assume!(a.area() > 1e-9);
            prop_assert!((giou(&a, &b) - iou(&a, &b)).abs() < 1e-12);
        }
    }
}
