use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

mod commands;
mod manifest;

use commands::{OptimizeArgs, SceneFlowPaths, SceneKind};

#[derive(Parser, Debug)]
#[command(
    name = "motionparse",
    version,
    about = "Depth, camera motion, flow and moving-object parsing of frame pairs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic frame pair with full ground truth.
    Synth {
        #[arg(long, value_enum)]
        scene: SceneKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Also render a rectified stereo view at this baseline.
        #[arg(long)]
        stereo_baseline: Option<f64>,
    },
    /// Decompose the ground-truth motion of a manifest into rigid and dynamic parts.
    Parse {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        alpha_s: f64,
        #[arg(long, default_value_t = motionparse::hmp::SEGMENTATION_THRESHOLD)]
        threshold: f64,
    },
    /// Evaluate the loss stack at the manifest's ground truth.
    Loss {
        #[arg(long)]
        manifest: PathBuf,
        /// Stage whose weights and alpha_s are used.
        #[arg(long, default_value = "depth_pose_guided_1")]
        stage: String,
        /// Seven comma-separated weights overriding the stage's.
        #[arg(long, value_delimiter = ',', num_args = 7)]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        alpha_s: Option<f64>,
        /// Report zero-weight terms too.
        #[arg(long)]
        all_terms: bool,
    },
    /// Run the stage-wise schedule from a smooth initial state.
    Optimize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Built-in profile: mono or stereo (defaults to the manifest's).
        #[arg(long)]
        stage_schedule: Option<String>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Multiplier on every stage's step sizes.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    EvalDepth {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        median_scale: bool,
    },
    EvalFlow {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
    },
    EvalSeg {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    EvalSceneflow {
        #[arg(long)]
        pred_d1: PathBuf,
        #[arg(long)]
        pred_d2: PathBuf,
        #[arg(long)]
        pred_flow: PathBuf,
        #[arg(long)]
        gt_d1: PathBuf,
        #[arg(long)]
        gt_d2: PathBuf,
        #[arg(long)]
        gt_flow: PathBuf,
        #[arg(long)]
        fg_mask: Option<PathBuf>,
    },
    EvalOdom {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Express relative errors per this much ground-truth path length.
        #[arg(long)]
        per_length: Option<f64>,
    },
}

fn configure_threads() {
    let Ok(v) = std::env::var("MOTIONPARSE_THREADS") else {
        return;
    };
    match v.trim().parse::<usize>() {
        Ok(n) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                error!("could not configure {n} worker threads: {e}");
            }
        }
        Err(_) => error!("ignoring MOTIONPARSE_THREADS={v:?}: not a number"),
    }
}

fn run(command: Command) -> motionparse::Result<serde_json::Value> {
    match command {
        Command::Synth {
            scene,
            out,
            seed,
            size,
            stereo_baseline,
        } => commands::synth(scene, seed, size, stereo_baseline, &out),
        Command::Parse {
            manifest,
            out,
            alpha_s,
            threshold,
        } => commands::parse(&manifest, alpha_s, threshold, &out),
        Command::Loss {
            manifest,
            stage,
            weights,
            alpha_s,
            all_terms,
        } => commands::loss(&manifest, &stage, weights.as_deref(), alpha_s, all_terms),
        Command::Optimize {
            manifest,
            out,
            stage_schedule,
            max_iters,
            lr,
            seed,
        } => commands::optimize(&OptimizeArgs {
            manifest: &manifest,
            profile: stage_schedule.as_deref(),
            max_iters,
            lr,
            seed,
            out: &out,
        }),
        Command::EvalDepth {
            pred,
            gt,
            valid,
            median_scale,
        } => commands::eval_depth(&pred, &gt, valid.as_deref(), median_scale),
        Command::EvalFlow { pred, gt, valid } => commands::eval_flow(&pred, &gt, valid.as_deref()),
        Command::EvalSeg { pred, gt } => commands::eval_seg(&pred, &gt),
        Command::EvalSceneflow {
            pred_d1,
            pred_d2,
            pred_flow,
            gt_d1,
            gt_d2,
            gt_flow,
            fg_mask,
        } => commands::eval_sceneflow(&SceneFlowPaths {
            pred_d1,
            pred_d2,
            pred_flow,
            gt_d1,
            gt_d2,
            gt_flow,
            fg_mask,
        }),
        Command::EvalOdom { pred, gt, per_length } => commands::eval_odom(&pred, &gt, per_length),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    configure_threads();
    match run(cli.command) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("JSON output"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
