//! `gsfit`: synthetic datasets, fitting, rendering, gradient checks and
//! evaluation from the command line.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical failure. Errors
//! are printed to stderr as one JSON record.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gsfit::loss::Stage;

use crate::config::{load_config, Overrides};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "gsfit", version, about = "Gaussian-splatting fitting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Render a seeded synthetic cloud from orbit cameras into a dataset.
    Gen,
    /// Render a cloud under a camera file or sampled orbit cameras.
    Render,
    /// Fit a cloud (stage 1) or cameras and cloud (stage 2) to a dataset.
    Fit,
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
    /// SSIM, PSNR, LPIPS slot, chamfer distance and F-score against ground truth.
    Eval,
    /// Write orbit cameras to a camera file.
    SampleCameras,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Debug, Args)]
struct Flags {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// 1: posed with metric extent, 2: unposed.
    #[arg(long, global = true)]
    stage: Option<StageArg>,
    /// Views per orbit for gen/sample-cameras, maximum views per step for fit.
    #[arg(long, global = true)]
    views: Option<usize>,
    /// Image width and height in pixels.
    #[arg(long, global = true)]
    resolution: Option<u32>,
    /// Gradient check tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Report chamfer distance and F-score in meters with a 0.05 m threshold.
    #[arg(long, global = true)]
    metric_scale: bool,
    /// Bit-reproducible reductions.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Base learning rate before per-group multipliers.
    #[arg(long, global = true)]
    base_lr: Option<f64>,
    /// Optimizer steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Dataset directory for fit.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Cloud file for render.
    #[arg(long, global = true)]
    cloud: Option<PathBuf>,
    /// Camera file for render.
    #[arg(long, global = true)]
    cameras: Option<PathBuf>,
    /// Prediction directory for eval.
    #[arg(long, global = true)]
    pred: Option<PathBuf>,
    /// Ground-truth dataset directory for eval.
    #[arg(long, global = true)]
    gt: Option<PathBuf>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            stage: self.stage.map(|s| match s {
                StageArg::One => Stage::Posed,
                StageArg::Two => Stage::Unposed,
            }),
            views: self.views,
            resolution: self.resolution,
            tol: self.tol,
            metric_scale: self.metric_scale,
            deterministic: self.deterministic,
            base_lr: self.base_lr,
            steps: self.steps,
            data: self.data.clone(),
            cloud: self.cloud.clone(),
            cameras: self.cameras.clone(),
            prediction: self.pred.clone(),
            ground_truth: self.gt.clone(),
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli.flags.config.as_deref())?.resolve(&cli.flags.overrides());
    let out = cli.flags.out.as_path();
    match cli.command {
        Command::Gen => commands::gen(&cfg, out),
        Command::Render => commands::render(&cfg, out),
        Command::Fit => commands::fit(&cfg, out),
        Command::Gradcheck => commands::gradcheck_cmd(&cfg, out),
        Command::Eval => commands::eval(&cfg, out),
        Command::SampleCameras => commands::sample_cameras(&cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError {
                failure: error::Failure::Validation,
                kind: "usage",
                message: e.kind().to_string() + ": " + e.to_string().lines().next().unwrap_or(""),
            };
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
