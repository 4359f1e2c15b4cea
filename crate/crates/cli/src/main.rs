//! `posetx`: synthetic data generation, training, transfer, evaluation and
//! gradient checking.
//!
//! Exit codes: 0 success, 1 I/O or data error, 2 invalid flags or config,
//! 3 non-finite values during training, 4 model dimension mismatch,
//! 5 gradient check failure.

mod commands;
mod settings;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pose_transfer::gradcheck::Which;
use pose_transfer::{Error, Mode};

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn io(msg: impl Into<String>) -> Self {
        Failure {
            code: 1,
            msg: msg.into(),
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: 2,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) => 2,
            Error::Diverged { .. } | Error::NonFinite { .. } | Error::NonFiniteValue { .. } => 3,
            Error::DimMismatch(_) => 4,
            _ => 1,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "posetx",
    version,
    about = "Unsupervised 3D pose transfer on synthetic meshes"
)]
struct Cli {
    /// key=value file supplying defaults for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic articulated-tube dataset with a manifest.
    GenData(GenDataArgs),
    /// Train the generator from a manifest.
    Train(TrainArgs),
    /// Transfer the pose of one mesh onto another.
    Transfer(TransferArgs),
    /// Score transfers against ground truth.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of identities [default: 4]
    #[arg(long)]
    pub n_ids: Option<usize>,
    /// Number of poses [default: 4]
    #[arg(long)]
    pub n_poses: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of identities and poses that are labelled [default: 1.0]
    #[arg(long)]
    pub split: Option<f64>,
    /// Uniform vertex jitter amplitude [default: 0]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Tube segments per mesh [default: 5]
    #[arg(long)]
    pub segments: Option<usize>,
    /// Vertex rings per segment [default: 6]
    #[arg(long)]
    pub rings: Option<usize>,
    /// Vertices per ring [default: 10]
    #[arg(long)]
    pub sides: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// supervised, unsupervised or semi [default: supervised]
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// [default: 200]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Triples per optimisation step [default: 2]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 1000]
    #[arg(long)]
    pub lambda_rec: Option<f64>,
    /// [default: 0.5]
    #[arg(long)]
    pub lambda_edge: Option<f64>,
    /// [default: 1]
    #[arg(long)]
    pub lambda_mesh_cc: Option<f64>,
    /// [default: 1]
    #[arg(long)]
    pub lambda_mesh_ss: Option<f64>,
    /// [default: 1]
    #[arg(long)]
    pub lambda_point: Option<f64>,
    /// Triplet margin [default: 1]
    #[arg(long)]
    pub margin: Option<f64>,
    /// Sinkhorn entropy [default: 0.05]
    #[arg(long)]
    pub sinkhorn_eps: Option<f64>,
    /// Sinkhorn iterations [default: 30]
    #[arg(long)]
    pub sinkhorn_iters: Option<usize>,
    /// Divide every layer width by 1, 4 or 8 [default: 1]
    #[arg(long)]
    pub dims_scale: Option<usize>,
    /// Explicit widths d1:d2:d3:d_id:d_pose:d_corr:r1:r2:r3:disentangle, overriding --dims-scale
    #[arg(long)]
    pub dims: Option<String>,
    /// Split latents into identity and pose parts [default: true]
    #[arg(long)]
    pub disentangle: Option<bool>,
    /// [default: 0]
    #[arg(long)]
    pub seed_init: Option<u64>,
    /// [default: 1]
    #[arg(long)]
    pub seed_shuffle: Option<u64>,
    /// [default: 2]
    #[arg(long)]
    pub seed_reorder: Option<u64>,
    /// Semi mode: labelled steps before this epoch, unlabelled after
    #[arg(long)]
    pub stage_switch_epoch: Option<usize>,
    /// Save a checkpoint every N epochs, 0 for final only [default: 10]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Mesh whose pose is transferred
    #[arg(long)]
    pub pose: PathBuf,
    /// Mesh whose identity and topology are kept
    #[arg(long)]
    pub identity: PathBuf,
    /// Also write the warped intermediate
    #[arg(long)]
    pub emit_warped: bool,
    /// obj or ply [default: extension of --identity, else ply]
    #[arg(long)]
    pub format: Option<String>,
    /// Vertex reordering seed [default: $MAPCON_SEED or 9001]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Expected width divisor; a different checkpoint is rejected
    #[arg(long)]
    pub dims_scale: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluate every cross-identity pair of this manifest
    #[arg(long, conflicts_with = "pairs")]
    pub manifest: Option<PathBuf>,
    /// CSV of pose,identity[,target] mesh paths
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Fail when a pair has no ground truth
    #[arg(long)]
    pub strict: bool,
    /// Record wall-clock seconds per pair instead of 0
    #[arg(long)]
    pub timing: bool,
    /// Vertex reordering seed [default: $MAPCON_SEED or 9001]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Expected width divisor; a different checkpoint is rejected
    #[arg(long)]
    pub dims_scale: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// ops, losses or all [default: all]
    #[arg(long)]
    pub which: Option<Which>,
    /// [default: 1e-4]
    #[arg(long)]
    pub tol: Option<f64>,
    /// First seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Consecutive seeds to check [default: 3]
    #[arg(long)]
    pub repeats: Option<u64>,
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = settings::Settings::load(cli.config.as_deref()).and_then(|s| match cli.command {
        Command::GenData(a) => commands::gen_data(a, &s),
        Command::Train(a) => commands::train(a, &s),
        Command::Transfer(a) => commands::transfer(a, &s),
        Command::Eval(a) => commands::eval(a, &s),
        Command::Gradcheck(a) => commands::gradcheck(a, &s),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
