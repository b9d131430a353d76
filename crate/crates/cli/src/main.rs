use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pairdet_cli::commands::{
    cmd_ablate, cmd_eval, cmd_generate, cmd_selfcheck, cmd_train, AblateArgs, CliResult, EvalArgs, Overrides, TrainArgs,
};

#[derive(Parser)]
#[command(name = "pairdet", version, about = "Paired center/top-left detection transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    Generate {
        /// Generation spec (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Train a model.
    Train {
        /// Training config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory with annotations.json and images/.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Box setting a, b, c or d.
        #[arg(long)]
        setting: Option<String>,
        /// Match strategy 1, 2 or 3.
        #[arg(long)]
        match_strategy: Option<String>,
    },
    /// Evaluate a checkpoint or a predictions file.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// COCO-style results JSON evaluated instead of a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Box setting used to decode model outputs.
        #[arg(long)]
        setting: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every cell of an ablation matrix.
    Ablate {
        /// Matrix file (JSON) with `cells` and optional `train`/`eval` bases.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation dataset; the training set when omitted.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the oracle self-check suite.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { config, out, seed, force } => {
            let s = cmd_generate(config.as_deref(), &out, seed, force)?;
            println!("generated {} images, {} objects, {} classes in {}", s.n_images, s.n_objects, s.n_classes, out.display());
        }
        Command::Train { config, data, common, seed, setting, match_strategy } => {
            let args = TrainArgs {
                config: config.as_deref(),
                data: &data,
                out: &common.out,
                overrides: Overrides { seed, setting, match_strategy },
                device: &common.device,
                force: common.force,
            };
            let (o, _) = cmd_train(&args)?;
            match o.history.last() {
                Some(m) => println!("trained {} steps, final loss {:.4}", o.history.len(), m.loss.total),
                None => println!("trained 0 steps"),
            }
            println!("checkpoint {}", o.checkpoint_path.display());
        }
        Command::Eval { checkpoint, predictions, data, config, setting, common } => {
            let args = EvalArgs {
                checkpoint: checkpoint.as_deref(),
                predictions: predictions.as_deref(),
                data: &data,
                out: &common.out,
                config: config.as_deref(),
                setting: setting.as_deref(),
                device: &common.device,
                force: common.force,
            };
            let (r, _) = cmd_eval(&args)?;
            let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            println!(
                "AP {:.4} AP50 {} AP75 {} AP_S {} AP_M {} AP_L {} ({} images, {} objects, {} detections)",
                r.ap,
                f(r.ap50),
                f(r.ap75),
                f(r.ap_small),
                f(r.ap_medium),
                f(r.ap_large),
                r.n_images,
                r.n_ground_truth,
                r.n_detections
            );
        }
        Command::Ablate { config, data, eval_data, common, seed } => {
            let args = AblateArgs {
                matrix: &config,
                data: &data,
                eval_data: eval_data.as_deref(),
                out: &common.out,
                seed,
                device: &common.device,
                force: common.force,
            };
            let (report, _) = cmd_ablate(&args)?;
            for t in &report.tables {
                println!("wrote {}", t.display());
            }
        }
        Command::Selfcheck { seed } => {
            cmd_selfcheck(seed)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Ok(n) = std::env::var("PAIRDET_NUM_THREADS") {
        // the tensor backend sizes its worker pool from this variable
        std::env::set_var("RAYON_NUM_THREADS", n);
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
