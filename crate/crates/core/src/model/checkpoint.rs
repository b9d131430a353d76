//! Checkpoint files: a safetensors container holding every parameter under
//! its store name (e.g. `decoder_center.layers.0.cross_attn.q_sine.weight`)
//! with header metadata `format`, `version` and `config` (the model config
//! as JSON).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::Device;
use safetensors::SafeTensors;

use super::{ModelConfig, PairDetr};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "pairdet-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

pub fn save_checkpoint(model: &PairDetr, path: &Path) -> Result<()> {
    let metadata = HashMap::from([
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("version".to_string(), CHECKPOINT_VERSION.to_string()),
        ("config".to_string(), serde_json::to_string(model.config())?),
    ]);
    let tensors: Vec<_> = model.params().vars().iter().map(|(k, v)| (k.clone(), v.as_tensor())).collect();
    safetensors::serialize_to_file(tensors, Some(metadata), path).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<PairDetr> {
    let buffer = fs::read(path)?;
    let ck = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&buffer).map_err(|e| ck(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(ck("not a detector checkpoint".into()));
    }
    if meta.get("version").map(String::as_str) != Some(CHECKPOINT_VERSION) {
        return Err(ck(format!("unsupported version {:?}", meta.get("version"))));
    }
    let config: ModelConfig = serde_json::from_str(meta.get("config").ok_or_else(|| ck("no config record".into()))?)?;
    let model = PairDetr::new(&config, 0, device)?;
    let tensors = candle_core::safetensors::load_buffer(&buffer, device)?;
    if tensors.len() != model.params().len() {
        return Err(ck(format!("{} tensors for {} parameters", tensors.len(), model.params().len())));
    }
    for (name, var) in model.params().vars() {
        let t = tensors.get(name).ok_or_else(|| ck(format!("missing parameter `{name}`")))?;
        if t.shape() != var.shape() {
            return Err(ck(format!("`{name}` has shape {:?}, expected {:?}", t.dims(), var.dims())));
        }
        var.set(t)?;
    }
    Ok(model)
}
