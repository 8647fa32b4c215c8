//! `iid`: synthetic data, training, decomposition, evaluation, edits and
//! ablations from the command line.
//!
//! Failures print one line `error[CLASS]: message` to stderr and exit with
//! 2 (usage), 3 (input file) or 4 (numeric failure).

mod cleanup;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iid_core::{Error, ErrorClass};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("IID_GIT_HASH"));

#[derive(Parser, Debug)]
#[command(name = "iid", version = VERSION, about = "Intrinsic image decomposition with ordinal shading")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthetic scene generation.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Train the ordinal or the decomposition network.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Decompose one image into albedo and shading.
    Decompose(DecomposeArgs),
    /// Build median-albedo pseudo ground truth from multi-illumination scenes.
    PseudoGt(PseudoGtArgs),
    /// Evaluate predictions.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Edit an image through its decomposition.
    #[command(subcommand)]
    Edit(EditCmd),
    /// Run an ablation end to end.
    Ablate(AblateArgs),
}

#[derive(Subcommand, Debug)]
pub enum SynthCmd {
    Gen(SynthGenArgs),
}

#[derive(Args, Debug)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: usize,
    /// Raster size as WxH.
    #[arg(long, value_parser = commands::parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub multi_illum: bool,
    #[arg(long)]
    pub specular: bool,
    #[arg(long)]
    pub ldr: bool,
}

#[derive(Subcommand, Debug)]
pub enum TrainCmd {
    Ordinal(TrainOrdinalArgs),
    Decomp(TrainDecompArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainCommon {
    /// Dataset root; repeat to mix datasets.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Run directory for config, checkpoints, loss log and report.
    /// Defaults to `<out>.run` next to the model.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainOrdinalArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    #[arg(long, default_value = "ssi-inverse")]
    pub variant: String,
}

#[derive(Args, Debug)]
pub struct TrainDecompArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    #[arg(long)]
    pub ordinal: PathBuf,
    #[arg(long)]
    pub no_albedo_loss: bool,
    #[arg(long, default_value = "all")]
    pub inputs: String,
    #[arg(long)]
    pub base_res: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub ordinal: PathBuf,
    #[arg(long)]
    pub decomp: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Largest working resolution (long side).
    #[arg(long, default_value_t = iid_core::pipeline::DEFAULT_CAP)]
    pub cap: usize,
    /// Base resolution; defaults to the one the decomposition model was trained with.
    #[arg(long)]
    pub base_res: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PseudoGtArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub ordinal: PathBuf,
    #[arg(long)]
    pub decomp: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = iid_core::pipeline::DEFAULT_CAP)]
    pub cap: usize,
    #[arg(long)]
    pub base_res: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum EvalCmd {
    /// Dense metrics of a decomposition against ground truth.
    Dense(EvalDenseArgs),
    /// WHDR of an albedo map against pairwise judgments.
    Whdr(EvalWhdrArgs),
}

#[derive(Args, Debug)]
pub struct EvalDenseArgs {
    /// Directory written by `decompose`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Scene directory with albedo.pfm and shading.pfm.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Comma-separated subset of lmse,rmse,ssim,ord,d3r,recon.
    #[arg(long, default_value = "lmse,rmse,ssim,ord,d3r,recon")]
    pub metrics: String,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = iid_core::metrics::ORD_PAIRS)]
    pub pairs: usize,
}

#[derive(Args, Debug)]
pub struct EvalWhdrArgs {
    #[arg(long)]
    pub albedo: PathBuf,
    #[arg(long)]
    pub judgments: PathBuf,
    /// Constant added to the albedo before judging.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub shift: f64,
    #[arg(long, default_value_t = iid_core::metrics::WHDR_DELTA)]
    pub delta: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum EditCmd {
    /// Replace the albedo inside a mask and reapply the shading.
    Recolor(RecolorArgs),
    /// Render the albedo under a virtual point light.
    Relight(RelightArgs),
    /// Exponentiate the shading around its median.
    Material(MaterialArgs),
}

#[derive(Args, Debug)]
pub struct RecolorArgs {
    #[arg(long)]
    pub albedo: PathBuf,
    #[arg(long)]
    pub shading: PathBuf,
    /// 8-bit PNG mask; nonzero pixels are recolored.
    #[arg(long)]
    pub mask: PathBuf,
    /// Linear RGB as r,g,b.
    #[arg(long, value_parser = commands::parse_triple::<f32>)]
    pub color: [f32; 3],
    #[arg(long)]
    pub preserve_luminance: bool,
    /// Output image (.pfm or .png).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RelightArgs {
    #[arg(long)]
    pub albedo: PathBuf,
    #[arg(long)]
    pub normals: PathBuf,
    /// Light position x,y,z in the pixel-plane frame.
    #[arg(long, value_parser = commands::parse_triple::<f64>, allow_hyphen_values = true)]
    pub light: [f64; 3],
    #[arg(long, default_value_t = 1.0)]
    pub intensity: f64,
    #[arg(long, default_value_t = 0.0)]
    pub ambient: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the new shading.
    #[arg(long)]
    pub shading_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MaterialArgs {
    #[arg(long)]
    pub albedo: PathBuf,
    #[arg(long)]
    pub shading: PathBuf,
    #[arg(long)]
    pub gamma: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub shading_out: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Ordinal,
    JointLoss,
    Inputs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    pub kind: AblationKind,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
    #[arg(long)]
    pub ordinal_iters: Option<usize>,
    #[arg(long)]
    pub decomp_iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub ordinal_res: Option<usize>,
    #[arg(long)]
    pub decomp_res: Option<usize>,
    #[arg(long)]
    pub base_res: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub ord_pairs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
}

fn class_code(class: ErrorClass) -> (&'static str, u8) {
    match class {
        ErrorClass::Usage => ("USAGE", 2),
        ErrorClass::Input => ("INPUT", 3),
        ErrorClass::Numeric => ("NUMERIC", 4),
    }
}

fn fail(class: ErrorClass, message: &str) -> ExitCode {
    let (code, status) = class_code(class);
    let line = message.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
    eprintln!("error[{code}]: {line}");
    ExitCode::from(status)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail(ErrorClass::Usage, first.trim_start_matches("error: "));
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.class(), &e.to_string()),
    }
}

/// Result type of the command layer.
pub type CmdResult<T = ()> = Result<T, Error>;
