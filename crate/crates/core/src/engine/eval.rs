//! COCO-style average precision.
//!
//! Per class and IoU threshold, detections are ranked by score and greedily
//! matched to the best-overlapping unmatched ground truth (IoU at least the
//! threshold). Precision is made monotone and sampled at 101 recall points.
//! Size buckets ignore ground truth outside the bucket, along with
//! detections matched to it or, when unmatched, themselves outside it.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{image_to_tensor, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxDecoder};
use crate::model::{detections_from_output, Detection, ForwardCtx, PairDetr};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Upper area bound (px²) of the small bucket.
    pub small_area: f64,
    /// Upper area bound (px²) of the medium bucket.
    pub medium_area: f64,
    pub score_threshold: f64,
    /// Images per forward pass.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    /// Bucket bounds are 32² and 96² px² rescaled from 640-px to 64-px images.
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect(),
            small_area: 32.0 * 32.0 / 100.0,
            medium_area: 96.0 * 96.0 / 100.0,
            score_threshold: 0.0,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over IoU thresholds and classes.
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    /// `None` when the bucket holds no ground truth.
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// Per class, averaged over thresholds; `None` without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub n_images: usize,
    pub n_ground_truth: usize,
    pub n_detections: usize,
}

/// Tolerance on the IoU threshold comparison.
const IOU_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Bucket {
    All,
    Small,
    Medium,
    Large,
}

impl Bucket {
    fn contains(self, area: f64, cfg: &EvalConfig) -> bool {
        match self {
            Bucket::All => true,
            Bucket::Small => area < cfg.small_area,
            Bucket::Medium => area >= cfg.small_area && area < cfg.medium_area,
            Bucket::Large => area >= cfg.medium_area,
        }
    }
}

/// 101-point interpolated AP of ranked `(score, is_tp)` entries against
/// `n_gt` positives.
pub fn interpolated_ap(entries: &mut [(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    // stable: equal scores keep image/detection order
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(entries.len());
    let mut precision = Vec::with_capacity(entries.len());
    for (i, &(_, hit)) in entries.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP of one class at one threshold within one bucket, or `None` when the
/// bucket has no ground truth of that class.
fn class_ap(dataset: &Dataset, dets: &[Vec<Detection>], class: usize, thr: f64, bucket: Bucket, cfg: &EvalConfig) -> Option<f64> {
    let mut entries = Vec::new();
    let mut n_gt = 0;
    for (sample, image_dets) in dataset.samples.iter().zip(dets) {
        let (w, h) = (sample.width() as f64, sample.height() as f64);
        let px_area = |b: &crate::geometry::BoxCXCYWH| b.w * w * b.h * h;
        let mut gts: Vec<(crate::geometry::Corners, bool)> = sample
            .targets
            .iter()
            .filter(|t| t.class_id == class)
            .map(|t| (t.bbox.to_corners(), !bucket.contains(px_area(&t.bbox), cfg)))
            .collect();
        // non-ignored ground truth first
        gts.sort_by_key(|g| g.1);
        n_gt += gts.iter().filter(|g| !g.1).count();

        let mut order: Vec<&Detection> = image_dets.iter().filter(|d| d.class_id == class).collect();
        order.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut taken = vec![false; gts.len()];
        for d in order {
            let dc = d.bbox.to_corners();
            let mut best: Option<usize> = None;
            let mut best_iou = thr - IOU_SLACK;
            for (g, (gc, ignored)) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                // once matched to a real object, never switch to an ignored one
                if let Some(m) = best {
                    if !gts[m].1 && *ignored {
                        break;
                    }
                }
                let v = iou(&dc, gc);
                if v < best_iou {
                    continue;
                }
                best_iou = v;
                best = Some(g);
            }
            match best {
                Some(g) => {
                    taken[g] = true;
                    if !gts[g].1 {
                        entries.push((d.score, true));
                    }
                }
                None => {
                    if bucket.contains(px_area(&d.bbox), cfg) {
                        entries.push((d.score, false));
                    }
                }
            }
        }
    }
    (n_gt > 0).then(|| interpolated_ap(&mut entries, n_gt))
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores `detections[i]` (for `dataset.samples[i]`) against the ground truth.
pub fn evaluate_detections(dataset: &Dataset, detections: &[Vec<Detection>], cfg: &EvalConfig) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if detections.len() != dataset.len() {
        return Err(Error::InvalidBatch(format!("{} detection lists for {} images", detections.len(), dataset.len())));
    }
    let n_classes = dataset.n_classes().max(dataset.samples.iter().flat_map(|s| &s.targets).map(|t| t.class_id + 1).max().unwrap_or(0));
    let at = |thr: f64, bucket: Bucket| -> Vec<Option<f64>> {
        (0..n_classes).map(|c| class_ap(dataset, detections, c, thr, bucket, cfg)).collect()
    };
    let bucket_mean = |bucket: Bucket| mean(cfg.iou_thresholds.iter().flat_map(|&t| at(t, bucket)).flatten());

    let grid: Vec<Vec<Option<f64>>> = cfg.iou_thresholds.iter().map(|&t| at(t, Bucket::All)).collect();
    let per_class: Vec<Option<f64>> =
        (0..n_classes).map(|c| mean(grid.iter().filter_map(|row| row[c]))).collect();
    let threshold_mean = |thr: f64| -> Option<f64> {
        match cfg.iou_thresholds.iter().position(|&t| (t - thr).abs() < 1e-9) {
            Some(i) => mean(grid[i].iter().flatten().copied()),
            None => mean(at(thr, Bucket::All).into_iter().flatten()),
        }
    };
    Ok(EvalReport {
        ap: mean(grid.iter().flatten().flatten().copied()).unwrap_or(0.0),
        ap50: threshold_mean(0.5),
        ap75: threshold_mean(0.75),
        ap_small: bucket_mean(Bucket::Small),
        ap_medium: bucket_mean(Bucket::Medium),
        ap_large: bucket_mean(Bucket::Large),
        per_class,
        n_images: dataset.len(),
        n_ground_truth: dataset.samples.iter().map(|s| s.targets.len()).sum(),
        n_detections: detections.iter().map(Vec::len).sum(),
    })
}

/// Runs the model on every image; consecutive images of equal size share
/// a forward pass.
pub fn predict_dataset(model: &PairDetr, dataset: &Dataset, mode: &dyn BoxDecoder, score_threshold: f64, batch_size: usize) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(dataset.len());
    let mut start = 0;
    while start < dataset.len() {
        let size = (dataset.samples[start].width(), dataset.samples[start].height());
        let mut end = start + 1;
        while end < dataset.len() && end - start < batch_size.max(1) && (dataset.samples[end].width(), dataset.samples[end].height()) == size {
            end += 1;
        }
        let images = dataset.samples[start..end]
            .iter()
            .map(|s| image_to_tensor(&s.image, model.device()))
            .collect::<Result<Vec<_>>>()?;
        let pred = model.forward(&Tensor::stack(&images, 0)?, &mut ForwardCtx::eval())?;
        for b in 0..end - start {
            out.push(detections_from_output(&pred, b, score_threshold, mode)?.into_iter().flatten().collect());
        }
        start = end;
    }
    Ok(out)
}

pub fn evaluate(model: &PairDetr, dataset: &Dataset, mode: &dyn BoxDecoder, cfg: &EvalConfig) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dets = predict_dataset(model, dataset, mode, cfg.score_threshold, cfg.batch_size)?;
    evaluate_detections(dataset, &dets, cfg)
}

/// Mean cosine similarity between the final-layer projections of each
/// query in the two decoders, over all queries of all images.
pub fn mean_pair_cosine(model: &PairDetr, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for s in &dataset.samples {
        let x = image_to_tensor(&s.image, model.device())?.unsqueeze(0)?;
        let out = model.forward(&x, &mut ForwardCtx::eval())?;
        let rows = |t: &Tensor| -> Result<Vec<Vec<f64>>> { Ok(t.get(0)?.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?) };
        for (a, b) in rows(out.center.last_projections())?.iter().zip(&rows(out.top_left.last_projections())?) {
            sum += crate::losses::cosine_sim(a, b)?;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}
