//! Random resize and random crop, keeping boxes consistent with pixels.

use image::imageops::{self, FilterType};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{pixel_box_to_normalized, DetectionSample, Target};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// Probability of cropping to a random patch before resizing.
    pub crop_prob: f64,
    /// Smallest patch side as a fraction of the image side.
    pub crop_min_fraction: f64,
    /// Inclusive range for the resized shorter side; `None` keeps the size.
    pub resize_shorter: Option<[u32; 2]>,
    /// Cap on the resized longer side.
    pub max_longer: u32,
}

impl Default for AugmentPolicy {
    /// Desk-scale version of the usual 480–800 px / 1333 px schedule.
    fn default() -> Self {
        Self { crop_prob: 0.5, crop_min_fraction: 0.6, resize_shorter: Some([48, 80]), max_longer: 133 }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self { crop_prob: 0.0, crop_min_fraction: 1.0, resize_shorter: None, max_longer: u32::MAX }
    }

    pub fn is_identity(&self) -> bool {
        self.crop_prob <= 0.0 && self.resize_shorter.is_none()
    }
}

pub fn augment(sample: &DetectionSample, policy: &AugmentPolicy, rng: &mut impl Rng) -> DetectionSample {
    let mut out = sample.clone();
    if policy.crop_prob > 0.0 && rng.random::<f64>() < policy.crop_prob {
        let (w, h) = (out.width(), out.height());
        let frac = policy.crop_min_fraction.clamp(0.0, 1.0);
        let cw = rng.random_range(((w as f64 * frac).ceil() as u32).max(1)..=w);
        let ch = rng.random_range(((h as f64 * frac).ceil() as u32).max(1)..=h);
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(0..=h - ch);
        out = crop_sample(&out, x0, y0, cw, ch);
    }
    if let Some([lo, hi]) = policy.resize_shorter {
        let (w, h) = (out.width() as f64, out.height() as f64);
        let target = rng.random_range(lo.min(hi)..=hi.max(lo)) as f64;
        let mut scale = target / w.min(h);
        if w.max(h) * scale > policy.max_longer as f64 {
            scale = policy.max_longer as f64 / w.max(h);
        }
        let nw = ((w * scale).round() as u32).max(1);
        let nh = ((h * scale).round() as u32).max(1);
        out = resize_sample(&out, nw, nh);
    }
    out
}

/// Resizes pixels; normalized boxes are unchanged.
pub fn resize_sample(sample: &DetectionSample, width: u32, height: u32) -> DetectionSample {
    if (width, height) == (sample.width(), sample.height()) {
        return sample.clone();
    }
    DetectionSample { image: imageops::resize(&sample.image, width, height, FilterType::Triangle), ..sample.clone() }
}

/// Crops to the pixel window `[x0, x0+w) × [y0, y0+h)`. Boxes are clipped to
/// the window and dropped once their clipped area is below one pixel.
pub fn crop_sample(sample: &DetectionSample, x0: u32, y0: u32, w: u32, h: u32) -> DetectionSample {
    let (iw, ih) = (sample.width() as f64, sample.height() as f64);
    let image = imageops::crop_imm(&sample.image, x0, y0, w, h).to_image();
    let (wx0, wy0, wx1, wy1) = (x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
    let targets = sample
        .targets
        .iter()
        .filter_map(|t| {
            let c = t.bbox.to_corners();
            let bx0 = (c.x0 * iw).max(wx0);
            let by0 = (c.y0 * ih).max(wy0);
            let bx1 = (c.x1 * iw).min(wx1);
            let by1 = (c.y1 * ih).min(wy1);
            let (bw, bh) = (bx1 - bx0, by1 - by0);
            if bw <= 0.0 || bh <= 0.0 || bw * bh < 1.0 {
                return None;
            }
            let bbox = pixel_box_to_normalized(bx0 - wx0, by0 - wy0, bw, bh, w as f64, h as f64);
            Some(Target { bbox, class_id: t.class_id })
        })
        .collect();
    DetectionSample { image, targets, ..sample.clone() }
}
