//! The COCO-annotation subset this crate reads and writes.
//!
//! ```json
//! {
//!   "images":      [{"id": 1, "file_name": "000001.png", "width": 64, "height": 64}],
//!   "annotations": [{"id": 1, "image_id": 1, "category_id": 3, "bbox": [x, y, w, h], "iscrowd": 0}],
//!   "categories":  [{"id": 3, "name": "red_triangle"}]
//! }
//! ```
//!
//! `bbox` is in absolute pixels. `iscrowd` and `area` are optional; crowd
//! annotations are skipped. Class indices follow ascending category id.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{normalized_to_pixel_box, pixel_box_to_normalized, Category, Dataset, DetectionSample, Target};
use crate::error::{Error, Result};

pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoFile {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            record: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }
}

fn schema(record: String, message: impl Into<String>) -> Error {
    Error::Schema { record, message: message.into() }
}

/// Reads `annotation_file` and the images it names under `image_dir`.
pub fn load_coco_subset(annotation_file: &Path, image_dir: &Path) -> Result<Dataset> {
    let file = CocoFile::parse(&fs::read_to_string(annotation_file)?)?;

    let mut categories: Vec<&CocoCategory> = file.categories.iter().collect();
    categories.sort_by_key(|c| c.id);
    let class_of: HashMap<u64, usize> = categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    if class_of.len() != categories.len() {
        return Err(schema("categories".into(), "duplicate category id"));
    }

    let mut index_of = HashMap::new();
    for (i, img) in file.images.iter().enumerate() {
        if img.width == 0 || img.height == 0 {
            return Err(schema(format!("images[{i}]"), "zero image size"));
        }
        if index_of.insert(img.id, i).is_some() {
            return Err(schema(format!("images[{i}]"), format!("duplicate image id {}", img.id)));
        }
    }

    let mut targets: Vec<Vec<Target>> = vec![Vec::new(); file.images.len()];
    for (i, ann) in file.annotations.iter().enumerate() {
        let record = format!("annotations[{i}]");
        let &img_idx = index_of
            .get(&ann.image_id)
            .ok_or_else(|| schema(record.clone(), format!("unknown image_id {}", ann.image_id)))?;
        let &class_id = class_of
            .get(&ann.category_id)
            .ok_or_else(|| schema(record.clone(), format!("unknown category_id {}", ann.category_id)))?;
        let [x, y, w, h] = <[f64; 4]>::try_from(ann.bbox.as_slice())
            .map_err(|_| schema(format!("{record}.bbox"), format!("expected 4 numbers, got {}", ann.bbox.len())))?;
        if ![x, y, w, h].iter().all(|v| v.is_finite()) || w < 0.0 || h < 0.0 {
            return Err(schema(format!("{record}.bbox"), format!("invalid box {:?}", ann.bbox)));
        }
        if ann.iscrowd != 0 {
            continue;
        }
        let img = &file.images[img_idx];
        let bbox = pixel_box_to_normalized(x, y, w, h, img.width as f64, img.height as f64);
        targets[img_idx].push(Target { bbox, class_id });
    }

    let mut samples = Vec::with_capacity(file.images.len());
    for (i, (img, targets)) in file.images.iter().zip(targets).enumerate() {
        let path = image_dir.join(&img.file_name);
        if !path.is_file() {
            return Err(Error::MissingImage(path));
        }
        let image = image::open(&path)?.to_rgb8();
        if (image.width(), image.height()) != (img.width, img.height) {
            return Err(schema(
                format!("images[{i}]"),
                format!("declared {}x{} but file is {}x{}", img.width, img.height, image.width(), image.height()),
            ));
        }
        samples.push(DetectionSample { image, targets, image_id: img.id, original_size: (img.height, img.width) });
    }

    Ok(Dataset {
        samples,
        categories: categories.into_iter().map(|c| Category { id: c.id, name: c.name.clone() }).collect(),
    })
}

/// The subset-schema record for `dataset`, with file names `{image_id:06}.png`.
pub fn to_coco(dataset: &Dataset) -> CocoFile {
    let mut images = Vec::with_capacity(dataset.len());
    let mut annotations = Vec::new();
    for s in &dataset.samples {
        let (w, h) = (s.width(), s.height());
        images.push(CocoImage { id: s.image_id, file_name: format!("{:06}.png", s.image_id), width: w, height: h });
        for t in &s.targets {
            // micro-pixel rounding keeps integer boxes exact through the round trip
            let bbox = normalized_to_pixel_box(&t.bbox, w as f64, h as f64).map(|v| (v * 1e6).round() / 1e6);
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: s.image_id,
                category_id: dataset.categories[t.class_id].id,
                area: Some(bbox[2] * bbox[3]),
                bbox: bbox.to_vec(),
                iscrowd: 0,
            });
        }
    }
    let categories = dataset.categories.iter().map(|c| CocoCategory { id: c.id, name: c.name.clone() }).collect();
    CocoFile { images, annotations, categories }
}

/// Writes `images/*.png` and [`ANNOTATION_FILE`] under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let coco = to_coco(dataset);
    for (s, rec) in dataset.samples.iter().zip(&coco.images) {
        s.image.save(image_dir.join(&rec.file_name))?;
    }
    fs::write(dir.join(ANNOTATION_FILE), serde_json::to_string_pretty(&coco)?)?;
    Ok(())
}

/// Reads a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    load_coco_subset(&dir.join(ANNOTATION_FILE), &dir.join("images"))
}
