//! Command implementations behind the `pairdet` binary.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use pairdet::data::{generate_synthetic, load_dataset, pixel_box_to_normalized, save_dataset, SyntheticSpec, ANNOTATION_FILE};
use pairdet::engine::{
    evaluate, evaluate_detections, run_ablation, train, AblationMatrix, AblationReport, EvalConfig, EvalReport, Setting,
    TrainConfig, TrainOutcome,
};
use pairdet::model::{load_checkpoint, Detection};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checks::{run_selfcheck, CheckResult, Subjects};
use crate::manifest::{file_hash, RunManifest};

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pairdet::Error),

    #[error("output directory {} is not empty; pass --force to replace it", .0.display())]
    OutputExists(PathBuf),

    #[error("{0}")]
    Usage(String),

    #[error("self-check failed: {}", .0.join(", "))]
    SelfcheckFailed(Vec<String>),

    #[error("{failed} of {total} ablation cells failed")]
    AblationFailed { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for a non-finite training loss, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(pairdet::Error::NonFiniteLoss { .. }) => 2,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn parse_device(name: &str) -> CliResult<Device> {
    match name.to_ascii_lowercase().as_str() {
        "cpu" => Ok(Device::Cpu),
        other => Err(CliError::Usage(format!("unsupported device `{other}` (built for: cpu)"))),
    }
}

/// Creates `dir`, refusing to touch a non-empty one unless `force`, in which
/// case its contents are removed first.
pub fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::OutputExists(dir.to_path_buf()));
        }
        if non_empty {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Reads a JSON config, naming the offending field path on failure.
fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| pairdet::Error::Config { path: e.path().to_string(), message: e.inner().to_string() }.into())
}

fn dataset_hash(dir: &Path) -> CliResult<String> {
    Ok(file_hash(&dir.join(ANNOTATION_FILE))?)
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub setting: Option<String>,
    pub match_strategy: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) -> CliResult<()> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(s) = &self.setting {
            cfg.setting = Setting::parse(s)?;
        }
        if let Some(m) = &self.match_strategy {
            cfg.match_strategy = m.clone();
        }
        cfg.validate()?;
        Ok(())
    }
}

pub struct GenerateSummary {
    pub n_images: usize,
    pub n_objects: usize,
    pub n_classes: usize,
    pub manifest: RunManifest,
}

/// Writes a synthetic dataset and its manifest under `out`.
pub fn cmd_generate(spec_file: Option<&Path>, out: &Path, seed: Option<u64>, force: bool) -> CliResult<GenerateSummary> {
    let mut spec: SyntheticSpec = match spec_file {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let dataset = generate_synthetic(&spec)?;
    prepare_out_dir(out, force)?;
    save_dataset(&dataset, out)?;
    let manifest = RunManifest::new("generate", &spec, spec.seed)?.write(out)?;
    Ok(GenerateSummary {
        n_images: dataset.len(),
        n_objects: dataset.samples.iter().map(|s| s.targets.len()).sum(),
        n_classes: dataset.n_classes(),
        manifest,
    })
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub data: &'a Path,
    pub out: &'a Path,
    pub overrides: Overrides,
    pub device: &'a str,
    pub force: bool,
}

pub fn resolve_train_config(path: Option<&Path>, overrides: &Overrides) -> CliResult<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_json(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<(TrainOutcome, RunManifest)> {
    let cfg = resolve_train_config(args.config, &args.overrides)?;
    let device = parse_device(args.device)?;
    let dataset = load_dataset(args.data)?;
    prepare_out_dir(args.out, args.force)?;
    let outcome = train(&cfg, &dataset, args.out, &device)?;
    let manifest = RunManifest::new("train", &cfg, cfg.seed)?.input("data", args.data, dataset_hash(args.data)?).write(args.out)?;
    Ok((outcome, manifest))
}

/// One detection in the usual COCO results format, `bbox` in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

pub struct EvalArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub predictions: Option<&'a Path>,
    pub data: &'a Path,
    pub out: &'a Path,
    pub config: Option<&'a Path>,
    pub setting: Option<&'a str>,
    pub device: &'a str,
    pub force: bool,
}

fn detections_from_records(dataset: &pairdet::data::Dataset, records: &[PredictionRecord]) -> CliResult<Vec<Vec<Detection>>> {
    let image_index: HashMap<u64, usize> = dataset.samples.iter().enumerate().map(|(i, s)| (s.image_id, i)).collect();
    let class_index: HashMap<u64, usize> = dataset.categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let mut out = vec![Vec::new(); dataset.len()];
    for (i, r) in records.iter().enumerate() {
        let schema = |m: String| pairdet::Error::Schema { record: format!("[{i}]"), message: m };
        let &img = image_index.get(&r.image_id).ok_or_else(|| schema(format!("unknown image_id {}", r.image_id)))?;
        let &class_id = class_index.get(&r.category_id).ok_or_else(|| schema(format!("unknown category_id {}", r.category_id)))?;
        let s = &dataset.samples[img];
        let [x, y, w, h] = r.bbox;
        let bbox = pixel_box_to_normalized(x, y, w, h, s.width() as f64, s.height() as f64);
        out[img].push(Detection { bbox, class_id, score: r.score });
    }
    Ok(out)
}

/// Evaluates a checkpoint, or a predictions file when given, on a dataset
/// and writes `report.json`.
pub fn cmd_eval(args: &EvalArgs) -> CliResult<(EvalReport, RunManifest)> {
    let cfg: EvalConfig = match args.config {
        Some(p) => read_json(p)?,
        None => EvalConfig::default(),
    };
    let setting = Setting::parse(args.setting.unwrap_or("d"))?;
    let device = parse_device(args.device)?;
    let dataset = load_dataset(args.data)?;
    let (report, input) = match (args.predictions, args.checkpoint) {
        (Some(p), _) => {
            let records: Vec<PredictionRecord> = read_json(p)?;
            (evaluate_detections(&dataset, &detections_from_records(&dataset, &records)?, &cfg)?, ("predictions", p))
        }
        (None, Some(c)) => {
            let model = load_checkpoint(c, &device)?;
            (evaluate(&model, &dataset, setting.box_decoder().as_ref(), &cfg)?, ("checkpoint", c))
        }
        (None, None) => return Err(CliError::Usage("eval needs --checkpoint or --predictions".into())),
    };
    prepare_out_dir(args.out, args.force)?;
    fs::write(args.out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        eval: &'a EvalConfig,
        setting: Setting,
    }
    let manifest = RunManifest::new("eval", &Resolved { eval: &cfg, setting }, 0)?
        .input("data", args.data, dataset_hash(args.data)?)
        .input(input.0, input.1, file_hash(input.1)?)
        .write(args.out)?;
    Ok((report, manifest))
}

pub struct AblateArgs<'a> {
    pub matrix: &'a Path,
    pub data: &'a Path,
    pub eval_data: Option<&'a Path>,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub device: &'a str,
    pub force: bool,
}

/// Runs every cell of an ablation matrix; the run counts as failed if any
/// cell failed, after all tables are written.
pub fn cmd_ablate(args: &AblateArgs) -> CliResult<(AblationReport, RunManifest)> {
    let mut matrix = AblationMatrix::from_json(&fs::read_to_string(args.matrix)?)?;
    if let Some(s) = args.seed {
        matrix.train.seed = s;
    }
    let cells = matrix.parse_cells()?;
    let device = parse_device(args.device)?;
    let train_set = load_dataset(args.data)?;
    let eval_path = args.eval_data.unwrap_or(args.data);
    let eval_set = load_dataset(eval_path)?;
    prepare_out_dir(args.out, args.force)?;
    let report = run_ablation(&cells, &matrix.train, &train_set, &eval_set, &matrix.eval, args.out, &device)?;
    let manifest = RunManifest::new("ablate", &matrix, matrix.train.seed)?
        .input("data", args.data, dataset_hash(args.data)?)
        .input("eval_data", eval_path, dataset_hash(eval_path)?)
        .write(args.out)?;
    let failed = report.rows.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        return Err(CliError::AblationFailed { failed, total: report.rows.len() });
    }
    Ok((report, manifest))
}

/// Runs the oracle suite; fails listing every failing check.
pub fn cmd_selfcheck(seed: u64) -> CliResult<Vec<CheckResult>> {
    let results = run_selfcheck(&Subjects::default(), seed);
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.name.to_string()).collect();
    for r in &results {
        println!("{}", r.line());
    }
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::SelfcheckFailed(failed))
    }
}
