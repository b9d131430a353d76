//! Filled-shape toy scenes with exact ground truth.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{pixel_box_to_normalized, Category, Dataset, DetectionSample, Target};
use crate::error::{Error, Result};
use crate::geometry::{iou, Corners};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

impl ShapeKind {
    fn label(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Triangle => "triangle",
        }
    }
}

/// Named fill color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeColor {
    pub name: String,
    pub rgb: [u8; 3],
}

/// Generation parameters. Classes are `shapes × colors`, shape-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub width: u32,
    pub height: u32,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<ShapeColor>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side length range in pixels, inclusive.
    pub min_size: u32,
    pub max_size: u32,
    pub seed: u64,
    /// Largest pairwise IoU allowed between objects of one image.
    pub overlap_cap: f64,
    /// Placement attempts per object before the spec is declared infeasible.
    pub max_retries: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_images: 100,
            width: 64,
            height: 64,
            shapes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle],
            colors: vec![
                ShapeColor { name: "red".into(), rgb: [220, 50, 50] },
                ShapeColor { name: "blue".into(), rgb: [60, 110, 235] },
            ],
            min_objects: 1,
            max_objects: 4,
            min_size: 8,
            max_size: 28,
            seed: 0,
            overlap_cap: 0.1,
            max_retries: 200,
        }
    }
}

impl SyntheticSpec {
    pub fn n_classes(&self) -> usize {
        self.shapes.len() * self.colors.len()
    }

    pub fn categories(&self) -> Vec<Category> {
        let mut out = Vec::with_capacity(self.n_classes());
        for shape in &self.shapes {
            for color in &self.colors {
                out.push(Category { id: out.len() as u64 + 1, name: format!("{}_{}", color.name, shape.label()) });
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Infeasible(m));
        if self.shapes.is_empty() || self.colors.is_empty() {
            return bad("no shapes or colors".into());
        }
        if self.min_objects > self.max_objects {
            return bad(format!("min_objects {} > max_objects {}", self.min_objects, self.max_objects));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad(format!("size range [{}, {}]", self.min_size, self.max_size));
        }
        if self.min_size > self.width || self.min_size > self.height {
            return bad(format!("objects of {} px do not fit a {}x{} image", self.min_size, self.width, self.height));
        }
        if !(0.0..=1.0).contains(&self.overlap_cap) {
            return bad(format!("overlap cap {}", self.overlap_cap));
        }
        Ok(())
    }
}

const BACKGROUND: u8 = 48;

/// Deterministic dataset: image `i` draws from its own RNG stream derived
/// from `(seed, i)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.n_images).map(|i| generate_image(spec, i as u64)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, categories: spec.categories() })
}

fn generate_image(spec: &SyntheticSpec, image_id: u64) -> Result<DetectionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(image_id);
    let (w, h) = (spec.width, spec.height);

    let mut image = RgbImage::from_fn(w, h, |_, _| {
        let v = BACKGROUND + rng.random_range(0..16u8);
        Rgb([v, v, v])
    });

    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<(Corners, usize)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut attempt = 0;
        let (rect, class_id) = loop {
            if attempt == spec.max_retries {
                return Err(Error::Infeasible(format!(
                    "image {image_id}: could not place object {} under overlap cap {}",
                    placed.len() + 1,
                    spec.overlap_cap
                )));
            }
            attempt += 1;
            let ow = rng.random_range(spec.min_size..=spec.max_size.min(w));
            let oh = rng.random_range(spec.min_size..=spec.max_size.min(h));
            let x0 = rng.random_range(0..=w - ow);
            let y0 = rng.random_range(0..=h - oh);
            let class_id = rng.random_range(0..spec.n_classes());
            let rect = Corners::new(x0 as f64, y0 as f64, (x0 + ow) as f64, (y0 + oh) as f64);
            if placed.iter().all(|(other, _)| iou(&rect, other) <= spec.overlap_cap) {
                break (rect, class_id);
            }
        };
        placed.push((rect, class_id));
    }

    let mut targets = Vec::with_capacity(placed.len());
    for &(rect, class_id) in &placed {
        let shape = spec.shapes[class_id / spec.colors.len()];
        let color = Rgb(spec.colors[class_id % spec.colors.len()].rgb);
        draw_shape(&mut image, shape, &rect, color);
        let bbox = pixel_box_to_normalized(rect.x0, rect.y0, rect.width(), rect.height(), w as f64, h as f64);
        targets.push(Target { bbox, class_id });
    }
    Ok(DetectionSample { image, targets, image_id, original_size: (h, w) })
}

fn draw_shape(image: &mut RgbImage, shape: ShapeKind, r: &Corners, color: Rgb<u8>) {
    let (x0, y0) = (r.x0 as u32, r.y0 as u32);
    let (x1, y1) = (r.x1 as u32, r.y1 as u32);
    let (cx, cy) = ((r.x0 + r.x1) / 2.0, (r.y0 + r.y1) / 2.0);
    let (rx, ry) = (r.width() / 2.0, r.height() / 2.0);
    for py in y0..y1 {
        for px in x0..x1 {
            let inside = match shape {
                ShapeKind::Rectangle => true,
                ShapeKind::Ellipse => {
                    let dx = (px as f64 + 0.5 - cx) / rx;
                    let dy = (py as f64 + 0.5 - cy) / ry;
                    dx * dx + dy * dy <= 1.0
                }
                // apex at top-center, base along the bottom edge; a pixel is
                // filled when its row band overlaps the triangle's span
                ShapeKind::Triangle => {
                    let half = (py as f64 + 1.0 - r.y0) / r.height() * rx;
                    (px as f64) < cx + half && (px as f64 + 1.0) > cx - half
                }
            };
            if inside {
                image.put_pixel(px, py, color);
            }
        }
    }
}
