//! `invrender`: render, optimize, relight and check scenes from the shell.
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 when `grad-check`
//! exceeds its tolerance. Set `RAYON_NUM_THREADS` to pick the worker count.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use invrender_core::grad::ParamGroup;
use invrender_core::synthetic::Preset;

#[derive(Debug, Parser)]
#[command(name = "invrender", version, about = "Differentiable path tracing and inverse rendering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render one of the scene's views.
    Render(RenderArgs),
    /// Recover materials, geometry and lights from the scene's views.
    Optimize(OptimizeArgs),
    /// Render from an arbitrary camera pose.
    NovelView(NovelViewArgs),
    /// Render the scene's views under replacement lights.
    Relight(RelightArgs),
    /// Compare analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Print PSNR and SSIM of two images as CSV.
    Metrics(MetricsArgs),
    /// Write a ground-truth scene and a perturbed starting scene.
    MakeSynthetic(MakeSyntheticArgs),
}

#[derive(Debug, Args)]
struct SamplingArgs {
    /// Samples per pixel.
    #[arg(long, default_value_t = 16)]
    spp: u32,
    /// Maximum path depth T.
    #[arg(long, default_value_t = 3)]
    bounces: u32,
    /// Random seed; defaults to the scene file's.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    scene: PathBuf,
    /// View index whose camera is used.
    #[arg(long, default_value_t = 0)]
    camera: usize,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Output path; a `.pfm` and a `.png` are written next to each other.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct OptimizeArgs {
    scene: PathBuf,
    /// Outer cycles over the stage order.
    #[arg(long, default_value_t = 3)]
    cycles: usize,
    /// Adam iterations per stage.
    #[arg(long, default_value_t = 400)]
    inner: usize,
    /// Stage order.
    #[arg(long, value_delimiter = ',', default_value = "diffuse,geometry,lights,specular")]
    stages: Vec<ParamGroup>,
    /// Training samples per pixel.
    #[arg(long, default_value_t = 1)]
    spp: u32,
    #[arg(long, default_value_t = 3)]
    bounces: u32,
    /// Resolution divisor applied to every view.
    #[arg(long, default_value_t = 8)]
    downsample: u32,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    lr_diffuse: f64,
    /// Geometry learning rate in units of 1% of the mesh bounding radius.
    #[arg(long, default_value_t = 0.5)]
    lr_geometry: f64,
    #[arg(long, default_value_t = 0.05)]
    lr_lights: f64,
    #[arg(long, default_value_t = 0.01)]
    lr_specular: f64,
    /// Learning rate at the end of each stage relative to its start.
    #[arg(long, default_value_t = 0.05)]
    final_lr_fraction: f64,
    /// Laplacian weight in the geometry stage.
    #[arg(long, default_value_t = 0.1)]
    laplacian: f64,
    /// Views sampled per iteration.
    #[arg(long, default_value_t = 1)]
    view_batch: usize,
    /// Held-out view; defaults to the last one.
    #[arg(long)]
    held_out: Option<usize>,
    /// Samples per pixel of held-out evaluation renders.
    #[arg(long, default_value_t = 16)]
    eval_spp: u32,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct NovelViewArgs {
    scene: PathBuf,
    /// Row-major 3x4 world-to-camera matrix.
    #[arg(long, num_args = 12, allow_hyphen_values = true, required = true)]
    pose: Vec<f64>,
    /// View whose intrinsics and exposure are reused.
    #[arg(long, default_value_t = 0)]
    intrinsics_from: usize,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RelightArgs {
    scene: PathBuf,
    /// TOML file with `[[lights]]` entries.
    lights: PathBuf,
    /// Views to render; defaults to all.
    #[arg(long, value_delimiter = ',')]
    views: Vec<usize>,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    scene: PathBuf,
    /// Group to check; all groups when omitted.
    #[arg(long)]
    group: Option<ParamGroup>,
    /// Finite-difference step; defaults per group.
    #[arg(long)]
    step: Option<f64>,
    /// Relative L2 tolerance; defaults per group.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Parameters checked per group, largest analytic gradient first.
    #[arg(long, default_value_t = 16)]
    params: usize,
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[arg(long, default_value_t = 4)]
    spp: u32,
    #[arg(long, default_value_t = 2)]
    bounces: u32,
    #[arg(long, default_value_t = 4)]
    downsample: u32,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    a: PathBuf,
    b: PathBuf,
    /// Mask image; nonzero pixels are compared.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MakeSyntheticArgs {
    #[arg(long, default_value = "sphere-plane")]
    preset: Preset,
    #[arg(long, default_value_t = 13)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    spp: u32,
    #[arg(long, default_value_t = 3)]
    bounces: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    perturb_seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Render(a) => commands::render(a),
        Command::Optimize(a) => commands::optimize(a),
        Command::NovelView(a) => commands::novel_view(a),
        Command::Relight(a) => commands::relight(a),
        Command::GradCheck(a) => commands::grad_check(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::MakeSynthetic(a) => commands::make_synthetic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<commands::ToleranceExceeded>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
