use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ow4d_cli as cli;
use ow4d_core::config::RunConfig;

/// 4D occupancy world model: generate synthetic driving scenes, train the
/// forecaster, predict future grids/trajectories/images, evaluate, render
/// depth and benchmark throughput.
#[derive(Parser)]
#[command(name = "ow4d", version, about)]
struct Args {
    /// Run configuration file (key = value); defaults apply when omitted
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (1 = fully sequential)
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Run the whole pipeline in 64-bit floats (gradient-check mode)
    #[arg(long = "f64", global = true)]
    use_f64: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Gen {
        /// Output dataset root (default: OW4D_DATA_DIR)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a generated dataset
    Train {
        /// Dataset root (default: OW4D_DATA_DIR)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory for model.ow4d / loss.csv / run.cfg
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast future frames for one scene directory
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop the image branch at inference
        #[arg(long)]
        no_images: bool,
    },
    /// Compare predictions against ground truth and write the metric CSV
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth dataset root (default: OW4D_DATA_DIR)
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render depth maps from predicted future volumes
    RenderDepth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure forecast throughput (forecasts/second over warm iterations)
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
    },
}

fn run(args: Args) -> ow4d_core::Result<()> {
    ow4d_core::exec::set_threads(args.threads);
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let f64_mode = args.use_f64;
    match args.command {
        Command::Gen { out } => {
            let dir = cli::cmd_gen(&cfg, out)?;
            println!("generated {} scenes under {}", cfg.scene.scenes, dir.display());
        }
        Command::Train { data, out } => {
            if f64_mode {
                cli::cmd_train::<f64>(&cfg, data, &out)?;
            } else {
                cli::cmd_train::<f32>(&cfg, data, &out)?;
            }
            println!("trained {} steps -> {}", cfg.train.steps, out.display());
        }
        Command::Forecast { checkpoint, scene, out, no_images } => {
            if f64_mode {
                cli::cmd_forecast::<f64>(&cfg, &checkpoint, &scene, &out, no_images)?;
            } else {
                cli::cmd_forecast::<f32>(&cfg, &checkpoint, &scene, &out, no_images)?;
            }
            println!("forecast written to {}", out.display());
        }
        Command::Eval { pred, gt, out } => {
            let report = cli::cmd_eval(&cfg, &pred, gt, &out)?;
            let avg = report.avg();
            println!(
                "avg mIoU {:.2}% IoU {:.2}% L2 {:.3} m collisions {:.2}% chamfer {:.4} m^2 -> {}",
                avg.miou,
                avg.iou,
                avg.l2_m,
                avg.collision_pct,
                avg.chamfer_m2,
                out.display()
            );
        }
        Command::RenderDepth { checkpoint, scene, out } => {
            if f64_mode {
                cli::cmd_render_depth::<f64>(&cfg, &checkpoint, &scene, &out)?;
            } else {
                cli::cmd_render_depth::<f32>(&cfg, &checkpoint, &scene, &out)?;
            }
            println!("depth maps written to {}", out.display());
        }
        Command::Bench { checkpoint, iterations } => {
            let fps = if f64_mode {
                cli::cmd_bench::<f64>(&cfg, checkpoint.as_deref(), iterations)?
            } else {
                cli::cmd_bench::<f32>(&cfg, checkpoint.as_deref(), iterations)?
            };
            println!("forecasts_per_second {fps:.3}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
