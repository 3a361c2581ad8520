//! Argument definitions. Options without a value fall back to the config
//! file and then to the built-in defaults.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tempres_core::{Norm, TransformKind};

#[derive(Debug, Parser)]
#[command(name = "tempres", version, about = "Local resolution of registration templates")]
pub struct Cli {
    /// Cap on worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `key = value` file; keys are flag names, optionally prefixed with the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Groupwise registration of an image stack.
    Register(RegisterArgs),
    /// Per-pixel resolution of a registered stack.
    Resolve(ResolveArgs),
    /// Bar overlay and heatmap of a resolution field.
    Visualize(VisualizeArgs),
    /// Sharp-edge model check against the analytic predictions.
    ModelCheck(ModelCheckArgs),
    /// Perturbed copies of a 3D phantom.
    Synth3d(Synth3dArgs),
}

#[derive(Debug, Args, Default)]
pub struct RegisterArgs {
    /// IDX3 image file, field file, or directory of field files.
    #[arg(long, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// IDX1 label file; required with --digit.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=9))]
    pub digit: Option<u8>,
    /// Number of images to use (default 100).
    #[arg(long)]
    pub limit: Option<usize>,
    /// affine or rigid (default affine).
    #[arg(long)]
    pub transform: Option<TransformKind>,
    /// l2 or l1 (default l2).
    #[arg(long)]
    pub norm: Option<Norm>,
    /// Regularization weight (default 1e-3).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Outer iterations (default 50).
    #[arg(long)]
    pub iters: Option<usize>,
    /// Transform updates per image and outer iteration (default 5).
    #[arg(long)]
    pub inner_steps: Option<usize>,
    /// Pyramid levels (default 2).
    #[arg(long)]
    pub pyramid_levels: Option<usize>,
    /// Relative energy change that ends the run (default 1e-6).
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub fit_intensity_scale: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct ResolveArgs {
    /// Output directory of `register`, or a directory of field files.
    #[arg(long)]
    pub registered: Option<PathBuf>,
    /// Effective edge height (default 0.6).
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub p0: Option<f64>,
    #[arg(long)]
    pub p1: Option<f64>,
    /// Bandwidth increment (default 0.25).
    #[arg(long)]
    pub step: Option<f64>,
    /// Largest bandwidth (default twice the largest extent).
    #[arg(long)]
    pub sigma_cap: Option<f64>,
    /// Heatmap plane for 3D fields as axis:index (default middle of axis 0).
    #[arg(long)]
    pub slice: Option<String>,
    /// Also report results for quantile ranges 0.7 and 0.9.
    #[arg(long)]
    pub sensitivity: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub sigma_star: Option<PathBuf>,
    /// Displayed plane for 3D fields as axis:index (default middle of axis 0).
    #[arg(long)]
    pub slice: Option<String>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub eps_grad: Option<f64>,
    /// Gradient bandwidth (default 1).
    #[arg(long)]
    pub sigma_g: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct ModelCheckArgs {
    /// Number of edges (default 1000).
    #[arg(long)]
    pub n: Option<usize>,
    /// Standard deviation of the edge positions (default 4).
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub p0: Option<f64>,
    #[arg(long)]
    pub p1: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    /// Grid length in pixels (default 128).
    #[arg(long)]
    pub len: Option<usize>,
    /// Optional output directory for the profile and report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct Synth3dArgs {
    /// Number of copies (default 8).
    #[arg(long)]
    pub n: Option<usize>,
    /// Voxels per axis (default 32).
    #[arg(long)]
    pub size: Option<usize>,
    /// Perturbation scale (default 0.05).
    #[arg(long)]
    pub perturb: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
