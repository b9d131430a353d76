//! Detection samples: synthetic generation, COCO-subset ingestion and
//! resize/crop augmentation.

mod augment;
mod coco;
mod synthetic;

use candle_core::{Device, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::BoxCXCYWH;

pub use augment::{augment, crop_sample, resize_sample, AugmentPolicy};
pub use coco::{load_coco_subset, load_dataset, save_dataset, to_coco, CocoAnnotation, CocoCategory, CocoFile, CocoImage, ANNOTATION_FILE};
pub use synthetic::{generate_synthetic, ShapeKind, SyntheticSpec};

/// One labelled object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub bbox: BoxCXCYWH,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub image: RgbImage,
    pub targets: Vec<Target>,
    pub image_id: u64,
    /// `(height, width)` of the source image before augmentation.
    pub original_size: (u32, u32),
}

impl DetectionSample {
    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    /// Identifier used in annotation files.
    pub id: u64,
    pub name: String,
}

/// Samples plus the category table; `class_id` indexes `categories`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<DetectionSample>,
    pub categories: Vec<Category>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.categories.len()
    }

    /// A dataset holding only the first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        Dataset { samples: self.samples.iter().take(n).cloned().collect(), categories: self.categories.clone() }
    }
}

/// Normalizes an absolute `[x, y, w, h]` pixel box on a `width × height`
/// image, clipping it to the image first.
pub fn pixel_box_to_normalized(x: f64, y: f64, w: f64, h: f64, width: f64, height: f64) -> BoxCXCYWH {
    let x0 = x.clamp(0.0, width);
    let y0 = y.clamp(0.0, height);
    let x1 = (x + w).clamp(0.0, width);
    let y1 = (y + h).clamp(0.0, height);
    BoxCXCYWH {
        cx: (x0 + x1) / 2.0 / width,
        cy: (y0 + y1) / 2.0 / height,
        w: (x1 - x0) / width,
        h: (y1 - y0) / height,
    }
}

/// Inverse of [`pixel_box_to_normalized`]: `[x, y, w, h]` in pixels.
pub fn normalized_to_pixel_box(b: &BoxCXCYWH, width: f64, height: f64) -> [f64; 4] {
    let c = b.to_corners();
    [c.x0 * width, c.y0 * height, (c.x1 - c.x0) * width, (c.y1 - c.y0) * height]
}

const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// `(3, H, W)` f32 tensor, channel-normalized.
pub fn image_to_tensor(image: &RgbImage, device: &Device) -> Result<Tensor> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in image.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = (px[c] as f32 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), device)?)
}
