//! Command-line front end for the alcfcn pipeline.
//!
//! Exit codes: 0 success, 2 config/contract errors, 3 IO/data errors,
//! 4 numeric failures (non-finite loss), 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use alcfcn_core::data::synth::{synth_generate, GenSpec};
use alcfcn_core::error::Error;
use alcfcn_core::pipeline::{self, RunConfig};

#[derive(Parser)]
#[command(
    name = "alcfcn",
    about = "Point-supervised fish segmentation with affinity-driven random-walk refinement",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Plain-text config file of `key = value` lines (dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single-key override, repeatable; wins over the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed override (wins over config and overrides).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset under data.root.
    GenData(CommonArgs),
    /// Train the point-supervised model (loss.plug = lcfcn | pl_fcn).
    TrainWeak(CommonArgs),
    /// Train the fully-supervised model on dataset or pseudo masks.
    TrainFull(CommonArgs),
    /// Export argmax pseudo-masks from a trained checkpoint.
    ExportPseudo {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated splits to export.
        #[arg(long, default_value = "train")]
        splits: String,
        /// Output directory (default: <out.dir>/pseudo).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split and emit the metrics report.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Predict masks and overlays for image files.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory (default: <out.dir>/predictions).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Train once per grid value and select by validation mIoU.
    Grid {
        #[command(flatten)]
        common: CommonArgs,
        /// KEY=V1,V2,... to vary; defaults to optimizer.lr over the lr grid.
        #[arg(long)]
        vary: Option<String>,
    },
}

fn build_config(common: &CommonArgs) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.resolve_out_dir();
    cfg.validate()?;
    Ok(cfg)
}

fn print_epoch(e: &alcfcn_core::pipeline::train::EpochLog) {
    println!(
        "epoch {:>4}  train loss {:>9.4}  val mIoU {:>7.4}  val MAE {:>6.3}  {:>6.1}s{}",
        e.epoch,
        e.train_loss,
        e.val_miou,
        e.val_mae,
        e.wall_s,
        if e.is_best { "  *best" } else { "" }
    );
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(common) => {
            let cfg = build_config(&common)?;
            let spec = GenSpec {
                n_train: cfg.gen_n_train,
                n_val: cfg.gen_n_val,
                n_test: cfg.gen_n_test,
                seed: cfg.seed,
                difficulty: cfg.difficulty()?,
                resolution: (64, 96),
            };
            let ds = synth_generate(&cfg.data_root, &spec)?;
            println!(
                "generated {} train / {} val / {} test at {:?} under {}",
                ds.len("train")?,
                ds.len("val")?,
                ds.len("test")?,
                ds.manifest.resolution,
                cfg.data_root.display()
            );
        }
        Command::TrainWeak(common) => {
            let cfg = build_config(&common)?;
            let outcome = pipeline::train_weak_with_progress(&cfg, &mut print_epoch)?;
            println!(
                "best epoch {} (val mIoU {:.4}); checkpoint: {}",
                outcome.log.best_epoch,
                outcome.log.best_val_miou,
                outcome.checkpoint.display()
            );
        }
        Command::TrainFull(common) => {
            let cfg = build_config(&common)?;
            let outcome = pipeline::train_full_with_progress(&cfg, &mut print_epoch)?;
            println!(
                "best epoch {} (val mIoU {:.4}); checkpoint: {}",
                outcome.log.best_epoch,
                outcome.log.best_val_miou,
                outcome.checkpoint.display()
            );
        }
        Command::ExportPseudo { common, checkpoint, splits, out } => {
            let cfg = build_config(&common)?;
            let out_dir = out.unwrap_or_else(|| cfg.out_dir.join("pseudo"));
            for split in splits.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let p = pipeline::export_pseudo(&checkpoint, split, &cfg, &out_dir)?;
                println!("exported {} masks for split {} to {}", p.n_masks, split, out_dir.display());
            }
        }
        Command::Eval { common, checkpoint, split } => {
            let cfg = build_config(&common)?;
            let report = pipeline::evaluate_model(&checkpoint, &split, &cfg)?;
            print!("{}", pipeline::eval::format_report(&report));
            println!("report written to {}", cfg.out_dir.join(format!("report-{split}.json")).display());
        }
        Command::Predict { common, checkpoint, out, images } => {
            let cfg = build_config(&common)?;
            let out_dir = out.unwrap_or_else(|| cfg.out_dir.join("predictions"));
            let outputs = pipeline::predict(&checkpoint, &images, &out_dir)?;
            println!("wrote {} masks to {}", outputs.len(), out_dir.display());
        }
        Command::Grid { common, vary } => {
            let cfg = build_config(&common)?;
            let (key, values) = match &vary {
                Some(spec) => {
                    let (k, vs) = spec.split_once('=').ok_or_else(|| {
                        Error::config(format!("--vary {spec:?} is not KEY=V1,V2,..."))
                    })?;
                    (
                        k.trim().to_string(),
                        vs.split(',').map(|v| v.trim().to_string()).collect::<Vec<_>>(),
                    )
                }
                None => (
                    "optimizer.lr".to_string(),
                    cfg.lr_grid.iter().map(|lr| format!("{lr:e}")).collect(),
                ),
            };
            let report = pipeline::run_grid(&cfg, &key, &values)?;
            print!("{}", alcfcn_core::pipeline::train::format_grid(&report));
            println!("selected {}={} -> {}", key, report.rows[report.selected].value, report.selected_checkpoint);
        }
    }
    Ok(())
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Io(_) | Error::Validation { .. } | Error::Format(_) => 3,
        Error::Numeric(_) => 4,
        Error::Dim(_) => 1,
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
