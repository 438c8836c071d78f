use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trackgroup::clustering::CountPolicy;
use trackgroup::config::{Overrides, RunConfig};
use trackgroup::dataio::{SceneFile, Split};
use trackgroup::error::{Error, Result};
use trackgroup::gtransformer::AttentionKind;
use trackgroup::model::GroupModel;
use trackgroup::pipeline;

/// Social group detection from bounding-box tracks.
///
/// Every option can also be set through an environment variable named
/// TRACKGROUP_<OPTION>, e.g. TRACKGROUP_SEED=3 or TRACKGROUP_DET_ONLY=true.
#[derive(Parser)]
#[command(name = "trackgroup", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true, env = "TRACKGROUP_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "TRACKGROUP_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, env = "TRACKGROUP_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, global = true, env = "TRACKGROUP_LR")]
    lr: Option<f64>,
    /// Attention variant: gtrans or gat.
    #[arg(long, global = true, env = "TRACKGROUP_ATTENTION")]
    attention: Option<AttentionKind>,
    #[arg(long, global = true, env = "TRACKGROUP_NO_RESIDUAL")]
    no_residual: bool,
    #[arg(long, global = true, env = "TRACKGROUP_NO_EUCLID")]
    no_euclid: bool,
    #[arg(long, global = true, env = "TRACKGROUP_DET_ONLY")]
    det_only: bool,
    #[arg(long, global = true, env = "TRACKGROUP_IOU_THRESH")]
    iou_thresh: Option<f64>,
    /// Group count policy: cardinality, eigengap or fallback.
    #[arg(long, global = true, env = "TRACKGROUP_POLICY")]
    policy: Option<CountPolicy>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (train/val/test scenes and a manifest).
    Synth {
        #[arg(long, env = "TRACKGROUP_OUT")]
        out: PathBuf,
    },
    /// Train on a manifest's train split, selecting on its val split.
    Train {
        #[arg(long, env = "TRACKGROUP_DATA")]
        data: PathBuf,
        #[arg(long, env = "TRACKGROUP_OUT")]
        out: PathBuf,
    },
    /// Predict groups for every key frame of one scene file.
    Infer {
        #[arg(long, env = "TRACKGROUP_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Write the predictions here instead of stdout.
        #[arg(long, env = "TRACKGROUP_OUT")]
        out: Option<PathBuf>,
    },
    /// Per-bucket AP and mAP on a dataset split.
    Eval {
        /// Omit to score the ground truth itself.
        #[arg(long, env = "TRACKGROUP_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = "TRACKGROUP_DATA")]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, env = "TRACKGROUP_OUT")]
        out: Option<PathBuf>,
    },
    /// Inference latency and parameter count.
    Bench {
        /// Omit to time a freshly initialised model.
        #[arg(long, env = "TRACKGROUP_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "10,25,50")]
        tracks: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        repeats: usize,
    },
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            epochs: self.epochs,
            lr: self.lr,
            attention: self.attention,
            no_residual: self.no_residual,
            no_euclid: self.no_euclid,
            det_only: self.det_only,
            iou_thresh: self.iou_thresh,
            policy: self.policy,
        })?;
        Ok(cfg)
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.common.resolve()?;
    match cli.command {
        Command::Synth { out } => {
            let (manifest, counts) = pipeline::synth_dataset(&cfg, &out)?;
            for c in counts {
                println!("{}: {} scenes, {} key frames", c.split.name(), c.scenes, c.keyframes);
            }
            println!("manifest: {}", manifest.display());
        }
        Command::Train { data, out } => {
            let art = pipeline::train_command(&cfg, &data, &out, |l| println!("{}", l.line()))?;
            let o = &art.outcome;
            println!(
                "best_epoch={} val_loss={} val_mAP={}",
                o.best_epoch,
                o.best_val_loss,
                o.best_val_map.map_or("undefined".into(), |m| format!("{m:.4}"))
            );
            println!("checkpoint: {}", art.checkpoint.display());
        }
        Command::Infer { checkpoint, scene, out } => {
            let (model, cfg) = pipeline::load_model(&checkpoint, &cfg)?;
            let records = pipeline::infer_command(&model, &cfg, &SceneFile::load(&scene)?)?;
            emit(&pipeline::format_predictions(&records, &cfg.hash()), out.as_deref())?;
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let report = match checkpoint {
                Some(path) => {
                    let (model, cfg) = pipeline::load_model(&path, &cfg)?;
                    pipeline::eval_command(Some(&model), &cfg, &data, split)?
                }
                None => pipeline::eval_command(None, &cfg, &data, split)?,
            };
            emit(&report.to_text(), out.as_deref())?;
        }
        Command::Bench {
            checkpoint,
            tracks,
            repeats,
        } => {
            let (model, cfg) = match checkpoint {
                Some(path) => pipeline::load_model(&path, &cfg)?,
                None => (GroupModel::new(cfg.model, cfg.seed)?, cfg),
            };
            for s in pipeline::bench_command(&model, &cfg, &tracks, repeats)? {
                println!("{}", s.line());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
