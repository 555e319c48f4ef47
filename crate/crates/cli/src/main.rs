mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "lbsplat",
    version,
    about = "Build, prune, inspect and render pose-driven Gaussian avatars"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Emit machine-readable JSON on stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dense avatar, pose sequence and corrective oracle.
    Synth(SynthArgs),
    /// Fit part MLPs and blendshapes to the oracle (fine-tunes a pruned model).
    Fit(FitArgs),
    /// Keep the top-N highest-variance blendshapes per attribute.
    Prune(PruneArgs),
    /// Print size report and validation diagnostics of a model.
    Inspect(InspectArgs),
    /// Render one pose to PNG.
    Render(RenderArgs),
    /// Time decode and render over a pose sequence.
    Bench(BenchArgs),
    /// Global vs local PCA on a corrective matrix.
    Pca(PcaArgs),
    /// Play a pose sequence on the GPU with per-stage timings.
    View(ViewArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Preset {
    Tiny,
    Desk,
    Paper,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Style {
    Random,
    Walk,
    Talk,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a pose sequence.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    #[arg(long, value_enum, default_value = "random")]
    pub style: Style,
    /// Period in frames of walk and talk sequences.
    #[arg(long, default_value_t = 60, value_parser = clap::value_parser!(u32).range(1..))]
    pub period: u32,
    /// Also write the oracle parameters (JSON).
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Also write the oracle position correctives of the pose sequence as a matrix file.
    #[arg(long, requires = "poses")]
    pub matrix: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Training pose sequence.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Oracle parameters written by `synth`; defaults to the standard oracle seeded with --seed.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub iterations: Option<u32>,
    /// Store reals as float16.
    #[arg(long)]
    pub quantize: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub poses: PathBuf,
    /// Blendshapes kept per attribute.
    #[arg(long)]
    pub keep: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub quantize: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub model: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Pose sequence file; rest pose when omitted.
    #[arg(long)]
    pub pose: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Camera JSON; a front view at --width x --height when omitted.
    #[arg(long, conflicts_with_all = ["width", "height"])]
    pub camera: Option<PathBuf>,
    #[arg(long, default_value_t = 512, value_parser = clap::value_parser!(u32).range(1..=16384))]
    pub width: u32,
    #[arg(long, default_value_t = 768, value_parser = clap::value_parser!(u32).range(1..=16384))]
    pub height: u32,
    #[arg(long)]
    pub out: PathBuf,
    /// Render on the GPU instead of the CPU.
    #[arg(long)]
    pub gpu: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    pub frames: u32,
    #[arg(long, default_value_t = 5)]
    pub warmup: u32,
    #[arg(long, default_value_t = 1920, value_parser = clap::value_parser!(u32).range(1..=16384))]
    pub width: u32,
    #[arg(long, default_value_t = 1080, value_parser = clap::value_parser!(u32).range(1..=16384))]
    pub height: u32,
    /// Pose sequence to cycle through; a random sequence when omitted.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    #[arg(long)]
    pub gpu: bool,
    /// Skip projection, sorting and rasterization.
    #[arg(long)]
    pub decode_only: bool,
}

#[derive(Args, Debug)]
pub struct PcaArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    pub k: u32,
    /// global, parts or random:SEED.
    #[arg(long, default_value = "global")]
    pub grouping: output::Grouping,
    /// Model whose body parts define the `parts` grouping.
    #[arg(long, conflicts_with = "groups")]
    pub model: Option<PathBuf>,
    /// Number of contiguous or random groups when no model is given.
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ViewArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub poses: Option<PathBuf>,
    #[arg(long, default_value_t = 120)]
    pub frames: usize,
    #[arg(long, default_value_t = 512, value_parser = clap::value_parser!(u32).range(1..=16384))]
    pub width: u32,
    #[arg(long, default_value_t = 768, value_parser = clap::value_parser!(u32).range(1..=16384))]
    pub height: u32,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
