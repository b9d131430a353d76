//! Training loop: two AdamW parameter groups, global-norm clipping, step
//! learning-rate drop, per-step metrics CSV and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TrainConfig;
use crate::data::{augment, image_to_tensor, resize_sample, Dataset, DetectionSample, Target};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::matching::match_output;
use crate::model::{save_checkpoint, ForwardCtx, PairDetr};

pub const METRICS_FILE: &str = "metrics.csv";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

const METRICS_HEADER: [&str; 10] = [
    "step",
    "epoch",
    "lr",
    "loss_total",
    "loss_cls_center",
    "loss_cls_tl_if_any",
    "loss_box_center",
    "loss_box_tl",
    "loss_contrastive",
    "grad_norm",
];

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub model: PairDetr,
    pub history: Vec<StepMetrics>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    step: usize,
    epoch: usize,
    image_ids: Vec<u64>,
    image_sizes: Vec<(u32, u32)>,
    targets: Vec<&'a [Target]>,
    loss: LossBreakdown,
}

/// Parameters whose name starts with `backbone.` form the backbone group.
fn param_groups(model: &PairDetr) -> (Vec<Var>, Vec<Var>) {
    let mut backbone = Vec::new();
    let mut rest = Vec::new();
    for (name, var) in model.params().vars() {
        if name.starts_with("backbone.") {
            backbone.push(var.clone());
        } else {
            rest.push(var.clone());
        }
    }
    (backbone, rest)
}

/// Global L2 norm of all gradients; rescales them in place when it exceeds
/// `max_norm > 0`.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for v in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let scaled = (g * scale)?;
                grads.insert(v.as_tensor(), scaled);
            }
        }
    }
    Ok(norm)
}

/// Stacks samples into one `(B, 3, H, W)` tensor, resizing to the first
/// sample's size where they differ.
pub fn collate(samples: &[DetectionSample], device: &Device) -> Result<(Tensor, Vec<Vec<Target>>)> {
    let (w, h) = (samples[0].width(), samples[0].height());
    let mut images = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let s = if (s.width(), s.height()) == (w, h) { s.clone() } else { resize_sample(s, w, h) };
        images.push(image_to_tensor(&s.image, device)?);
        targets.push(s.targets);
    }
    Ok((Tensor::stack(&images, 0)?, targets))
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

/// Trains a fresh model on `dataset`, writing metrics and checkpoints under
/// `out_dir`. Bit-reproducible for a fixed config on one thread.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, out_dir: &Path, device: &Device) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model_cfg = cfg.resolved_model()?;
    if dataset.n_classes() != model_cfg.n_classes {
        return Err(Error::Config {
            path: "model.n_classes".into(),
            message: format!("{} classes configured but the dataset has {}", model_cfg.n_classes, dataset.n_classes()),
        });
    }
    let strategy = cfg.strategy()?;
    let mode = cfg.setting.box_decoder();
    let loss_cfg = cfg.resolved_loss();
    fs::create_dir_all(out_dir)?;
    let ck_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;

    let model = PairDetr::new(&model_cfg, cfg.seed, device)?;
    let (backbone_vars, other_vars) = param_groups(&model);
    let all_vars: Vec<Var> = backbone_vars.iter().chain(&other_vars).cloned().collect();
    let adamw = |lr: f64| ParamsAdamW { lr, weight_decay: cfg.weight_decay, ..Default::default() };
    let mut opt_backbone = AdamW::new(backbone_vars, adamw(cfg.lr_backbone))?;
    let mut opt_transformer = AdamW::new(other_vars, adamw(cfg.lr_transformer))?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut writer = csv::Writer::from_path(&metrics_path)?;
    writer.write_record(METRICS_HEADER)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut ctx = ForwardCtx::train(cfg.seed.wrapping_add(0x5eed));
    let mut history = Vec::new();
    let mut step = 0usize;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..cfg.epochs {
        let (lr_b, lr_t) = cfg.learning_rates(epoch);
        opt_backbone.set_learning_rate(lr_b);
        opt_transformer.set_learning_rate(lr_t);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break 'epochs;
            }
            let samples: Vec<DetectionSample> =
                chunk.iter().map(|&i| augment(&dataset.samples[i], &cfg.augment, &mut rng)).collect();
            let (images, targets) = collate(&samples, device)?;
            let out = model.forward(&images, &mut ctx)?;
            let loss = match_output(&out, &targets, strategy.as_ref(), mode.as_ref(), &cfg.cost, &loss_cfg.focal, loss_cfg.aux_loss)
                .and_then(|matches| total_loss(&out, &targets, &matches, mode.as_ref(), &loss_cfg));
            let loss = match loss {
                Ok(l) if l.breakdown.total.is_finite() => l,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    let breakdown = loss.map(|l| l.breakdown).unwrap_or(LossBreakdown { total: f64::NAN, ..Default::default() });
                    let dump = out_dir.join(DIAGNOSTIC_FILE);
                    let diag = Diagnostic {
                        step,
                        epoch,
                        image_ids: samples.iter().map(|s| s.image_id).collect(),
                        image_sizes: samples.iter().map(|s| (s.height(), s.width())).collect(),
                        targets: samples.iter().map(|s| s.targets.as_slice()).collect(),
                        loss: breakdown,
                    };
                    fs::write(&dump, serde_json::to_string_pretty(&diag)?)?;
                    writer.flush()?;
                    return Err(Error::NonFiniteLoss { step, dump });
                }
                Err(e) => return Err(e),
            };
            let mut grads = loss.loss.backward()?;
            let grad_norm = clip_grad_norm(&mut grads, &all_vars, cfg.grad_clip)?;
            opt_backbone.step(&grads)?;
            opt_transformer.step(&grads)?;

            let m = StepMetrics { step, epoch, lr: lr_t, loss: loss.breakdown, grad_norm };
            let b = &m.loss;
            let cls_tl = if loss_cfg.top_left_class_loss { fmt(b.cls_top_left) } else { String::new() };
            writer.write_record([
                step.to_string(),
                epoch.to_string(),
                fmt(lr_t),
                fmt(b.total),
                fmt(b.cls_center),
                cls_tl,
                fmt(b.box_center),
                fmt(b.box_top_left),
                fmt(b.contrastive),
                fmt(grad_norm),
            ])?;
            history.push(m);
            step += 1;
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(&model, &ck_dir.join(format!("epoch_{:04}.safetensors", epoch + 1)))?;
        }
    }
    writer.flush()?;
    let checkpoint_path = ck_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&model, &checkpoint_path)?;
    Ok(TrainOutcome { model, history, metrics_path, checkpoint_path })
}
