use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::geometry::{Averaged, BoxDecoder, PairOnly, WhOnly};
use crate::losses::LossConfig;
use crate::matching::{resolve_match_strategy, CostWeights, MatchStrategy};
use crate::model::ModelConfig;

/// Box-ablation setting: which of contrastive coupling, regressed extent
/// and pair-coordinate extent are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    A,
    B,
    C,
    D,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::A, Setting::B, Setting::C, Setting::D];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Setting::A),
            "b" => Ok(Setting::B),
            "c" => Ok(Setting::C),
            "d" => Ok(Setting::D),
            _ => Err(Error::unknown("setting", s, ["a", "b", "c", "d"])),
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Setting::A => "a",
            Setting::B => "b",
            Setting::C => "c",
            Setting::D => "d",
        }
    }

    pub fn contrastive(self) -> bool {
        self != Setting::A
    }

    /// Whether the center decoder's regressed `(w, h)` is used.
    pub fn uses_wh(self) -> bool {
        self != Setting::C
    }

    /// Whether the pair-coordinate extent is used.
    pub fn uses_pair_coordinates(self) -> bool {
        matches!(self, Setting::C | Setting::D)
    }

    pub fn box_decoder(self) -> Arc<dyn BoxDecoder> {
        match (self.uses_wh(), self.uses_pair_coordinates()) {
            (true, false) => Arc::new(WhOnly),
            (false, _) => Arc::new(PairOnly),
            (true, true) => Arc::new(Averaged),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub lr_backbone: f64,
    pub lr_transformer: f64,
    pub weight_decay: f64,
    /// First epoch trained at the reduced rate.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Max global gradient norm; 0 disables clipping.
    pub grad_clip: f64,
    pub setting: Setting,
    /// Match strategy name or label.
    pub match_strategy: String,
    pub cost: CostWeights,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub augment: AugmentPolicy,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            max_steps: None,
            lr_backbone: 1e-5,
            lr_transformer: 1e-4,
            weight_decay: 1e-4,
            lr_drop_epoch: 40,
            lr_drop_factor: 0.1,
            batch_size: 4,
            seed: 0,
            grad_clip: 0.1,
            setting: Setting::D,
            match_strategy: "3".into(),
            cost: CostWeights::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentPolicy::default(),
            checkpoint_every: 0,
        }
    }
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

impl TrainConfig {
    /// Parses JSON, naming the offending field path on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: TrainConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| config_error(&e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.lr_drop_epoch >= self.epochs {
            return Err(config_error("lr_drop_epoch", format!("{} must be below epochs {}", self.lr_drop_epoch, self.epochs)));
        }
        for (path, v) in [("lr_backbone", self.lr_backbone), ("lr_transformer", self.lr_transformer)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_error(path, "must be positive"));
            }
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(config_error("lr_drop_factor", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_error("weight_decay", "must be non-negative"));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(config_error("grad_clip", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(config_error("batch_size", "must be positive"));
        }
        resolve_match_strategy(&self.match_strategy).map_err(|e| config_error("match_strategy", e.to_string()))?;
        self.loss.validate()?;
        self.model.validate().map_err(|e| config_error("model", e.to_string()))?;
        Ok(())
    }

    pub fn strategy(&self) -> Result<Arc<dyn MatchStrategy>> {
        resolve_match_strategy(&self.match_strategy)
    }

    /// Model config with the head layout the match strategy requires.
    pub fn resolved_model(&self) -> Result<ModelConfig> {
        Ok(ModelConfig { separate_class_heads: self.strategy()?.separate_class_heads(), ..self.model.clone() })
    }

    /// Loss config with the setting's contrastive switch applied.
    pub fn resolved_loss(&self) -> LossConfig {
        LossConfig { contrastive: self.setting.contrastive(), ..self.loss.clone() }
    }

    /// `(backbone, transformer)` learning rates for `epoch`.
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        let f = if epoch >= self.lr_drop_epoch { self.lr_drop_factor } else { 1.0 };
        (self.lr_backbone * f, self.lr_transformer * f)
    }

    /// Transformer-group rate for every epoch.
    pub fn lr_schedule(&self) -> Vec<f64> {
        (0..self.epochs).map(|e| self.learning_rates(e).1).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_tenfold() {
        let s = TrainConfig::default().lr_schedule();
        assert_eq!(s.len(), 50);
        assert!(s[..40].iter().all(|&v| v == 1e-4));
        assert!(s[40..].iter().all(|&v| (v - 1e-5).abs() < 1e-20));
        assert_eq!(TrainConfig::default().learning_rates(45).0, 1e-5 * 0.1);
    }

    #[test]
    fn settings_toggle_flags() {
        let flags: Vec<_> = Setting::ALL.iter().map(|s| (s.contrastive(), s.uses_wh(), s.uses_pair_coordinates())).collect();
        assert_eq!(flags, vec![(false, true, false), (true, true, false), (true, false, true), (true, true, true)]);
        let modes: Vec<_> = Setting::ALL.iter().map(|s| s.box_decoder().name()).collect();
        assert_eq!(modes, vec!["wh_only", "wh_only", "pair_only", "averaged"]);
        assert!(Setting::parse("e").is_err());
        assert_eq!(Setting::parse("C").unwrap(), Setting::C);
    }

    #[test]
    fn json_errors_name_field_paths() {
        let cases = [
            (r#"{"epochs": "ten"}"#, "epochs"),
            (r#"{"loss": {"temprature": 0.5}}"#, "loss.temprature"),
            (r#"{"model": {"d_model": -1}}"#, "model.d_model"),
            (r#"{"setting": "z"}"#, "setting"),
            (r#"{"epochs": 10, "lr_drop_epoch": 10}"#, "lr_drop_epoch"),
            (r#"{"match_strategy": "7"}"#, "match_strategy"),
        ];
        for (text, path) in cases {
            match TrainConfig::from_json(text) {
                Err(Error::Config { path: p, .. }) => assert_eq!(p, path, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = TrainConfig { setting: Setting::B, match_strategy: "1".into(), ..Default::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        assert!(cfg.resolved_model().unwrap().separate_class_heads);
        assert!(cfg.resolved_loss().contrastive);
        let a = TrainConfig { setting: Setting::A, ..Default::default() };
        assert!(!a.resolved_loss().contrastive);
    }
}
