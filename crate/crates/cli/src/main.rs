//! `s2w`: generate data, train, fuse, evaluate and benchmark from the shell.

mod commands;
mod manifest;
mod preview;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "s2w", version, about = "Wavelet-domain dual-branch pansharpening")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "S2W_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Where to write the run manifest (defaults next to the command's output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic reduced-resolution triplets.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Fuse a PAN/LRMS pair with a checkpoint.
    Fuse(FuseArgs),
    /// Score a fused image.
    Eval(EvalArgs),
    /// Time the selective scan or the 2D wavelet at growing sizes.
    Bench(BenchArgs),
    /// Apply a wavelet transform to an image file.
    Dwt(DwtArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 8)]
    pub bands: usize,
    /// Edge of the square ground truth.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Also render the first ground truth as a graymap.
    #[arg(long)]
    pub preview: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory holding `train/` (and optionally `val/`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 4e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    /// Feature width of both branches.
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    /// `none`, or flags joined by `+`, e.g. `CRM` or `no_Gm+no_Ga`.
    #[arg(long, default_value = "none")]
    pub ablation: String,
    /// Validate every this many steps (and after the last); 0 validates once.
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Also write the history table here.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub pan: PathBuf,
    #[arg(long)]
    pub lrms: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub preview: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Prediction, scored against `--gt`.
    #[arg(long, requires = "gt", conflicts_with = "fused")]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Full-resolution product, scored against `--lrms` and `--pan`.
    #[arg(long, requires_all = ["lrms", "pan"])]
    pub fused: Option<PathBuf>,
    #[arg(long)]
    pub lrms: Option<PathBuf>,
    #[arg(long)]
    pub pan: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    #[arg(long, default_value_t = 1.0)]
    pub peak: f64,
    /// Print JSON instead of key=value lines.
    #[arg(long)]
    pub json: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchOp {
    Scan,
    Dwt,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub op: BenchOp,
    /// Sequence lengths (scan) or pixel counts (dwt).
    #[arg(long, value_delimiter = ',', default_value = "1024,4096,16384")]
    pub sizes: Vec<usize>,
    /// Runs per size; the median is reported.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Scan channels.
    #[arg(long, default_value_t = 64)]
    pub d_inner: usize,
    /// Scan state size.
    #[arg(long, default_value_t = 16)]
    pub d_state: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DwtMode {
    #[value(name = "1d")]
    OneD,
    #[value(name = "2d")]
    TwoD,
}

#[derive(Args, Debug)]
pub struct DwtArgs {
    #[arg(long, value_enum)]
    pub mode: DwtMode,
    #[arg(long)]
    pub input: PathBuf,
    /// Write the stacked subbands here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Invert the transform and report the reconstruction error.
    #[arg(long)]
    pub roundtrip: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
