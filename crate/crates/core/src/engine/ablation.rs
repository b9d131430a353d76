//! Train-and-evaluate matrices over box settings and match strategies.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::config::{Setting, TrainConfig};
use super::eval::{evaluate, EvalConfig, EvalReport};
use super::train::train;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matching::resolve_match_strategy;

pub const SETTINGS_TABLE: &str = "table3.csv";
pub const STRATEGIES_TABLE: &str = "table5.csv";

/// Setting fixed for strategy cells and strategy fixed for setting cells.
pub const STRATEGY_FOR_SETTINGS: &str = "3";
pub const SETTING_FOR_STRATEGIES: Setting = Setting::D;

const CHECK: &str = "✓";

/// One ablation cell: a box setting `a`–`d` or a match strategy `1`–`3`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Setting(Setting),
    Strategy(String),
}

impl Cell {
    pub fn parse(id: &str) -> Result<Self> {
        if let Ok(s) = Setting::parse(id) {
            return Ok(Cell::Setting(s));
        }
        let s = resolve_match_strategy(id)
            .map_err(|_| Error::unknown("ablation cell", id, ["a", "b", "c", "d", "1", "2", "3"]))?;
        Ok(Cell::Strategy(s.label().to_string()))
    }

    pub fn id(&self) -> String {
        match self {
            Cell::Setting(s) => s.id().to_string(),
            Cell::Strategy(s) => s.clone(),
        }
    }

    /// `base` with this cell's setting and strategy applied.
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        match self {
            Cell::Setting(s) => TrainConfig { setting: *s, match_strategy: STRATEGY_FOR_SETTINGS.into(), ..base.clone() },
            Cell::Strategy(s) => TrainConfig { setting: SETTING_FOR_STRATEGIES, match_strategy: s.clone(), ..base.clone() },
        }
    }

    /// Flag columns of the cell's table row.
    pub fn flags(&self) -> Result<Vec<bool>> {
        Ok(match self {
            Cell::Setting(s) => vec![s.contrastive(), s.uses_wh(), s.uses_pair_coordinates()],
            Cell::Strategy(id) => {
                let s = resolve_match_strategy(id)?;
                vec![s.separate_class_heads(), !s.separate_class_heads(), s.uses_top_left_class_cost(), s.uses_center_class_cost()]
            }
        })
    }
}

/// Ablation matrix file: `{"cells": ["a", "d", "3"], "train": {...}, "eval": {...}}`.
/// `train` is the base config each cell overrides; both default when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    pub cells: Vec<String>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl AblationMatrix {
    /// Parses JSON, naming the offending field path on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let m: AblationMatrix = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config { path: e.path().to_string(), message: e.inner().to_string() })?;
        m.train.validate()?;
        m.parse_cells()?;
        Ok(m)
    }

    pub fn parse_cells(&self) -> Result<Vec<Cell>> {
        self.cells
            .iter()
            .enumerate()
            .map(|(i, c)| Cell::parse(c).map_err(|e| Error::Config { path: format!("cells[{i}]"), message: e.to_string() }))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub cell: Cell,
    pub result: std::result::Result<EvalReport, String>,
}

pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Tables written, settings first.
    pub tables: Vec<PathBuf>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn write_table(path: &Path, flag_names: &[&str], rows: &[&AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["setting"];
    header.extend_from_slice(flag_names);
    header.extend_from_slice(&["AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L", "status"]);
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.cell.id()];
        rec.extend(row.cell.flags()?.into_iter().map(|f| if f { CHECK.to_string() } else { String::new() }));
        match &row.result {
            Ok(r) => {
                rec.extend([format!("{:.4}", r.ap), opt(r.ap50), opt(r.ap75), opt(r.ap_small), opt(r.ap_medium), opt(r.ap_large)]);
                rec.push("ok".into());
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 6));
                rec.push(format!("failed: {e}"));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains and evaluates each cell under `out_dir/<cell id>/`, then writes
/// the settings table and/or strategies table. A failing cell is recorded
/// in its row and does not stop the others.
pub fn run_ablation(
    cells: &[Cell],
    base: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
    eval_cfg: &EvalConfig,
    out_dir: &Path,
    device: &Device,
) -> Result<AblationReport> {
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let cfg = cell.config(base);
        let dir = out_dir.join(format!("cell_{}", cell.id()));
        let result = train(&cfg, train_set, &dir, device)
            .and_then(|o| evaluate(&o.model, eval_set, cfg.setting.box_decoder().as_ref(), eval_cfg))
            .map_err(|e| e.to_string());
        rows.push(AblationRow { cell: cell.clone(), result });
    }
    let settings: Vec<&AblationRow> = rows.iter().filter(|r| matches!(r.cell, Cell::Setting(_))).collect();
    let strategies: Vec<&AblationRow> = rows.iter().filter(|r| matches!(r.cell, Cell::Strategy(_))).collect();
    let mut tables = Vec::new();
    if !settings.is_empty() {
        let p = out_dir.join(SETTINGS_TABLE);
        write_table(&p, &["cont_learning", "wh", "pair_coordinates"], &settings)?;
        tables.push(p);
    }
    if !strategies.is_empty() {
        let p = out_dir.join(STRATEGIES_TABLE);
        write_table(&p, &["head_sep", "head_sh", "tl_cls_cost", "cent_cls_cost"], &strategies)?;
        tables.push(p);
    }
    Ok(AblationReport { rows, tables })
}
