//! `raydepth`: synthesize datasets, train, evaluate, infer depth, export
//! pointclouds and uncertainty curves.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use raydepth::evalmetrics::Crop;
use raydepth::synthdata::Split;
use raydepth::Error;

use commands::*;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "raydepth", version, about = "Scale-aware monocular depth from camera-ray embeddings")]
struct Cli {
    /// Worker threads for rendering, training and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Protocol {
    #[arg(long)]
    min_depth: Option<f64>,
    #[arg(long)]
    max_depth: Option<f64>,
    /// `none` or `garg`.
    #[arg(long, value_parser = parse_crop)]
    crop: Option<Crop>,
    /// Also report the median-scaled track.
    #[arg(long)]
    median_scale: bool,
    /// Latent samples decoded per image.
    #[arg(long)]
    samples: Option<usize>,
    /// `train`, `val` or `all`.
    #[arg(long, value_parser = parse_split)]
    split: Option<Option<Split>>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides samples per camera family.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train a model, writing checkpoints and loss.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the total epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Train only on this camera family.
        #[arg(long)]
        family: Option<String>,
    },
    /// Evaluate a checkpoint per camera family.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        protocol: Protocol,
        /// Relative noise applied to the intrinsics before prediction.
        #[arg(long)]
        intrinsics_noise: Option<f64>,
    },
    /// Predict mean depth and σ maps for one image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Unproject depth maps into one colored PLY pointcloud.
    Pointcloud {
        #[arg(long, num_args = 1.., required = true)]
        depth: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        intrinsics: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        image: Vec<PathBuf>,
        /// Per-camera extrinsics (12 numbers: row-major R, then t).
        #[arg(long, num_args = 1..)]
        extrinsics: Vec<PathBuf>,
        /// Per-camera σ maps used for filtering.
        #[arg(long, num_args = 1..)]
        sigma: Vec<PathBuf>,
        /// Keep this fraction of valid pixels with the lowest σ.
        #[arg(long, default_value_t = 1.0)]
        filter_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics after discarding the most uncertain pixels.
    Curves {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        protocol: Protocol,
        /// Comma-separated retained fractions.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
}

fn load_config(common: &Common) -> raydepth::Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_protocol(cfg: &mut RunConfig, p: &Protocol) {
    if let Some(v) = p.min_depth {
        cfg.protocol.min_depth = v;
    }
    if let Some(v) = p.max_depth {
        cfg.protocol.max_depth = v;
    }
    if let Some(c) = p.crop {
        cfg.protocol.crop = c;
    }
    cfg.protocol.median_scale |= p.median_scale;
    if let Some(n) = p.samples {
        cfg.eval.samples = n;
    }
}

fn required(flag: Option<PathBuf>, configured: &Option<PathBuf>, key: &str) -> raydepth::Result<PathBuf> {
    flag.or_else(|| configured.clone()).ok_or_else(|| Error::Config {
        key: key.into(),
        reason: "not given on the command line or in the config".into(),
    })
}

/// Checkpoint loading with an explicit config checks the network section.
fn model_for(path: &Path, common: &Common, cfg: &RunConfig) -> raydepth::Result<raydepth::network::Model<f32>> {
    load_model(path, common.config.as_ref().map(|_| cfg))
}

fn run(cli: Cli) -> raydepth::Result<()> {
    match cli.command {
        Command::Synth { common, out, samples } => {
            let mut cfg = load_config(&common)?;
            let out = required(out, &cfg.paths.output, "paths.output")?;
            synth(&mut cfg, &SynthArgs { out, samples })
        }
        Command::Train {
            common,
            data,
            out,
            resume,
            epochs,
            family,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.schedule.epochs = e;
            }
            cfg.validate()?;
            let data = required(data, &cfg.paths.dataset, "paths.dataset")?;
            let out = required(out, &cfg.paths.output, "paths.output")?;
            train_cmd(
                &cfg,
                &TrainArgs {
                    data,
                    out,
                    resume,
                    family,
                },
            )
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
            protocol,
            intrinsics_noise,
        } => {
            let mut cfg = load_config(&common)?;
            apply_protocol(&mut cfg, &protocol);
            if let Some(s) = intrinsics_noise {
                cfg.eval.intrinsics_noise = s;
            }
            cfg.validate()?;
            let model = model_for(&checkpoint, &common, &cfg)?;
            let data = required(data, &cfg.paths.dataset, "paths.dataset")?;
            let out = required(out, &cfg.paths.output, "paths.output")?;
            eval(
                &model,
                &cfg,
                &EvalArgs {
                    data,
                    out,
                    split: protocol.split.flatten(),
                },
            )
        }
        Command::Infer {
            common,
            checkpoint,
            image,
            intrinsics,
            out,
            samples,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = samples {
                cfg.eval.samples = n;
            }
            cfg.validate()?;
            let model = model_for(&checkpoint, &common, &cfg)?;
            infer(&model, &cfg, &InferArgs { image, intrinsics, out })
        }
        Command::Pointcloud {
            depth,
            intrinsics,
            image,
            extrinsics,
            sigma,
            filter_fraction,
            out,
        } => pointcloud(&PointcloudArgs {
            depth,
            intrinsics,
            image,
            extrinsics,
            sigma,
            filter_fraction,
            out,
        }),
        Command::Curves {
            common,
            checkpoint,
            data,
            out,
            protocol,
            fractions,
        } => {
            let mut cfg = load_config(&common)?;
            apply_protocol(&mut cfg, &protocol);
            if let Some(f) = fractions {
                cfg.eval.fractions = f;
            }
            cfg.validate()?;
            let model = model_for(&checkpoint, &common, &cfg)?;
            let data = required(data, &cfg.paths.dataset, "paths.dataset")?;
            curves(
                &model,
                &cfg,
                &CurvesArgs {
                    data,
                    out,
                    split: protocol.split.flatten(),
                },
            )
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Parse { .. } | Error::Schema(_) | Error::Domain(_) => 1,
        Error::Io(_) | Error::Aborted(_) | Error::Diff(_) | Error::BehindCamera(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        eprintln!("error: cannot start thread pool: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
