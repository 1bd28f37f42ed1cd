use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cubefield::SamplingMode;

#[derive(Parser, Debug)]
#[command(name = "cubefield", version, about = "Fit, render and evaluate panoramic cubic fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Split an equirectangular PNG into six cube-face PNGs.
    E2c(E2cArgs),
    /// Assemble six cube-face PNGs into an equirectangular PNG.
    C2e(C2eArgs),
    /// Fit a cubic field to a scene manifest.
    Fit(FitArgs),
    /// Render a field at one pose.
    Render(RenderArgs),
    /// Render numbered frames along a trajectory file.
    Path(PathArgs),
    /// Compare predicted depth maps with ground truth.
    Eval(EvalArgs),
    /// Serve pose-conditioned frames over HTTP.
    Serve(ServeArgs),
    /// Write a procedural textured room scene with ground-truth depth.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct E2cArgs {
    pub input: PathBuf,
    /// Output directory for face_{B,D,F,L,R,U}.png.
    pub out_dir: PathBuf,
    #[arg(long = "face-size", default_value_t = 256)]
    pub face_size: usize,
}

#[derive(Args, Debug)]
pub struct C2eArgs {
    /// Directory holding face_{B,D,F,L,R,U}.png.
    pub in_dir: PathBuf,
    pub output: PathBuf,
    /// Panorama width; defaults to four face widths.
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sampling {
    Planar,
    Raycube,
    Both,
}

impl From<Sampling> for SamplingMode {
    fn from(s: Sampling) -> Self {
        match s {
            Sampling::Planar => SamplingMode::Planar,
            Sampling::Raycube => SamplingMode::RayCube,
            Sampling::Both => SamplingMode::Both,
        }
    }
}

/// Overrides for values that otherwise come from the scene manifest.
#[derive(Args, Debug, Default, Clone)]
pub struct SceneFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of depth planes d.
    #[arg(long)]
    pub planes: Option<usize>,
    /// Cube face width w in pixels.
    #[arg(long = "face-size")]
    pub face_size: Option<usize>,
    #[arg(long)]
    pub near: Option<f64>,
    #[arg(long)]
    pub far: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Scene manifest (TOML).
    pub scene: PathBuf,
    /// Output field directory; also receives trace.csv and depth.pfm.
    #[arg(long, short)]
    pub out: PathBuf,
    #[command(flatten)]
    pub scene_flags: SceneFlags,
    #[arg(long, value_enum, default_value_t = Sampling::Planar)]
    pub sampling: Sampling,
    #[arg(long = "lambda-l1", default_value_t = 1.0)]
    pub lambda_l1: f64,
    #[arg(long = "lambda-ssim", default_value_t = 1.0)]
    pub lambda_ssim: f64,
    #[arg(long = "lambda-edge", default_value_t = 0.1)]
    pub lambda_edge: f64,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    #[arg(long = "step-size", default_value_t = 0.1)]
    pub step_size: f64,
    /// Learning-rate factor reached at the last iteration.
    #[arg(long = "step-decay", default_value_t = 0.1)]
    pub step_decay: f64,
    /// Also optimize the blending stages; their weights go to <out>/blend.
    #[arg(long)]
    pub blend: bool,
    /// Print one trace line every N iterations (0 disables).
    #[arg(long = "log-every", default_value_t = 10)]
    pub log_every: usize,
}

/// Pose given as a unit quaternion and a translation.
#[derive(Args, Debug, Clone)]
pub struct PoseArgs {
    /// Rotation quaternion w,x,y,z.
    #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [1.0, 0.0, 0.0, 0.0], allow_negative_numbers = true)]
    pub rotation: Vec<f64>,
    /// Translation x,y,z in metres.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 0.0, 0.0], allow_negative_numbers = true)]
    pub translation: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RenderMode {
    Panorama,
    Cubemap,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    pub field_dir: PathBuf,
    /// Output PNG (panorama) or directory (cubemap).
    #[arg(long, short)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pose: PoseArgs,
    #[arg(long, value_enum, default_value_t = RenderMode::Panorama)]
    pub mode: RenderMode,
    /// Panorama width; defaults to four face widths.
    #[arg(long)]
    pub width: Option<usize>,
    /// Also write depth (.pfm or 16-bit millimetre .png).
    #[arg(long)]
    pub depth: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PathArgs {
    pub field_dir: PathBuf,
    pub trajectory: PathBuf,
    #[arg(long = "out-dir", short)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub width: Option<usize>,
    /// Also write frame_NNNN_depth.pfm next to each frame.
    #[arg(long)]
    pub depth: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted depth file or directory.
    pub pred: PathBuf,
    /// Ground-truth depth file or directory; files pair up by stem.
    pub gt: PathBuf,
    /// Metrics CSV output.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long = "min-depth", default_value_t = 0.3)]
    pub min_depth: f64,
    #[arg(long = "max-depth", default_value_t = 10.0)]
    pub max_depth: f64,
    #[arg(long = "median-scaling")]
    pub median_scaling: bool,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long = "field-dir")]
    pub field_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Render threads per request.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    pub out_dir: PathBuf,
    /// Panorama width of the rendered views.
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 3)]
    pub views: usize,
    /// Bound on each translation component as a fraction of near.
    #[arg(long, default_value_t = 0.4)]
    pub baseline: f64,
    #[arg(long, default_value_t = 3)]
    pub supersample: usize,
    #[command(flatten)]
    pub scene_flags: SceneFlags,
}
