mod commands;
mod conditions;
mod optimize_config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use metavox_core::BaseMaterial;

/// Voxel metamaterial design: homogenization, topology optimization,
/// conditional diffusion sampling and dataset curation.
#[derive(Parser, Serialize)]
#[command(name = "metavox", version, propagate_version = true)]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "METAVOX_THREADS")]
    pub threads: Option<usize>,

    /// Human-readable output instead of JSON.
    #[arg(long, global = true)]
    pub pretty: bool,

    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Where to write the resolved-config manifest of this run.
    #[arg(long = "run-manifest", global = true, default_value = "metavox-run.json")]
    pub run_manifest: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Effective elasticity tensor of a voxel cell.
    Homogenize(HomogenizeArgs),
    /// Hashin-Shtrikman and Voigt bounds at a volume fraction.
    Bounds(BoundsArgs),
    /// Topology optimization of an eighth cell.
    Optimize(OptimizeArgs),
    /// Build an initial dataset of trigonometric structures.
    Dataset(DatasetArgs),
    /// Train (or continue training) the diffusion model.
    Train(TrainArgs),
    /// Train the bulk-ratio regressor used by guided interpolation.
    TrainRegressor(TrainRegressorArgs),
    /// Sample structures for a property condition.
    Sample(SampleArgs),
    /// Invert a structure to its DDIM noise.
    Invert(InvertArgs),
    /// Interpolate between two structures through their inverted noises.
    Interpolate(InterpolateArgs),
    /// Apply the cleaning rules to structures or a manifest.
    Clean(CleanArgs),
    /// Density-based deduplication of a manifest.
    Dedup(DedupArgs),
    /// Run the active-learning loop.
    ActiveLoop(ActiveLoopArgs),
    /// Evaluation metrics.
    #[command(subcommand)]
    Metrics(MetricsCommand),
}

#[derive(Args, Serialize, Clone, Copy)]
pub struct MaterialArgs {
    /// Young's modulus of the solid phase.
    #[arg(long, default_value_t = 1.0)]
    pub youngs: f64,
    /// Poisson's ratio of the solid phase.
    #[arg(long = "base-poisson", default_value_t = 0.3)]
    pub base_poisson: f64,
    /// Relative stiffness assigned to void voxels.
    #[arg(long, default_value_t = 1e-6)]
    pub void_floor: f64,
}

impl MaterialArgs {
    pub fn base(&self) -> BaseMaterial {
        BaseMaterial { youngs: self.youngs, poisson: self.base_poisson, void_floor: self.void_floor }
    }
}

#[derive(Args, Serialize)]
pub struct HomogenizeArgs {
    /// Input .vxl file.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Relative residual tolerance of the CG solves.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[command(flatten)]
    pub material: MaterialArgs,
}

#[derive(Args, Serialize)]
pub struct BoundsArgs {
    /// Solid volume fraction.
    #[arg(long)]
    pub vf: f64,
    #[command(flatten)]
    pub material: MaterialArgs,
}

#[derive(Args, Serialize)]
pub struct OptimizeArgs {
    /// Key = value file (objective, vf, resolution, iters, seed, init, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// max_bulk, max_shear, max_young or min_poisson.
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub vf: Option<f64>,
    /// Eighth-cell side length.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Initial design: a .vxl grid or a density file; trigonometric if absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Add the isotropy (Zener) penalty.
    #[arg(long)]
    pub isotropy: bool,
    /// Output design.
    #[arg(long, default_value = "design.vxl")]
    pub out: PathBuf,
    /// Iteration history JSON (default: next to the design).
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub material: MaterialArgs,
}

#[derive(Args, Serialize)]
pub struct DatasetArgs {
    /// Store directory; receives the .vxl files, manifest.jsonl and ranges.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    #[arg(long, default_value_t = 16)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0.15)]
    pub vf_min: f64,
    #[arg(long, default_value_t = 0.6)]
    pub vf_max: f64,
    #[arg(long, default_value_t = 1)]
    pub max_freq_min: usize,
    #[arg(long, default_value_t = 3)]
    pub max_freq_max: usize,
    /// Topology-optimization iterations per structure (0 keeps level sets).
    #[arg(long, default_value_t = 0)]
    pub topopt_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[command(flatten)]
    pub material: MaterialArgs,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    /// Training manifest (JSONL).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Store directory holding the manifest's .vxl files.
    #[arg(long)]
    pub store: PathBuf,
    /// Output checkpoint.
    #[arg(long, default_value = "model.mvxc")]
    pub out: PathBuf,
    /// Continue from this checkpoint (keeps its ranges and architecture).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// U-Net level widths.
    #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32, 64])]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 0.1)]
    pub cond_dropout: f64,
    /// Per-step loss history JSON.
    #[arg(long)]
    pub losses: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct TrainRegressorArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "regressor.mvxc")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    #[command(flatten)]
    pub material: MaterialArgs,
}

#[derive(Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSON object with any of c11, c12, c44, vol; missing or -1 is unconditioned.
    #[arg(long, default_value = "{}")]
    pub cond: String,
    /// The condition is in physical units rather than normalized.
    #[arg(long)]
    pub physical: bool,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// Homogenize every sample and keep the one closest to the condition.
    #[arg(long)]
    pub best_of: bool,
    #[arg(long, default_value_t = 1.0)]
    pub guidance: f64,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Disable self-conditioning during sampling.
    #[arg(long)]
    pub no_self_cond: bool,
    /// Start from this noise file (from `invert`) instead of random noise.
    #[arg(long)]
    pub noise: Option<PathBuf>,
    #[arg(long, default_value = "samples")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[command(flatten)]
    pub material: MaterialArgs,
}

#[derive(Args, Serialize)]
pub struct InvertArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = "noise.mvxf")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Fixed-point refinements per inversion step.
    #[arg(long, default_value_t = 3)]
    pub refine: usize,
}

#[derive(Args, Serialize)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub start: PathBuf,
    #[arg(long)]
    pub end: PathBuf,
    /// Number of frames, endpoints included.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 3)]
    pub refine: usize,
    /// Regressor checkpoint; enables guided interpolation.
    #[arg(long)]
    pub regressor: Option<PathBuf>,
    /// RMS size of each guidance step on the latent.
    #[arg(long, default_value_t = 0.1)]
    pub step_size: f64,
    #[arg(long, default_value = "frames")]
    pub out_dir: PathBuf,
}

#[derive(Args, Serialize)]
pub struct CleanArgs {
    /// Structures to check.
    pub files: Vec<PathBuf>,
    /// Check a manifest instead (requires --store).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Write the accepted records of --manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct DedupArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub bins: usize,
    #[arg(long, default_value_t = 2)]
    pub cap: usize,
    /// Normalization ranges JSON (default: min/max of the manifest).
    #[arg(long)]
    pub ranges: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct ActiveLoopArgs {
    /// Initial manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Training steps per round.
    #[arg(long, default_value_t = 500)]
    pub train_steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 32)]
    pub bins: usize,
    #[arg(long, default_value_t = 2)]
    pub cap: usize,
    #[arg(long, default_value_t = 0.2)]
    pub outside_fraction: f64,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value = "active")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub material: MaterialArgs,
}

#[derive(Subcommand, Serialize)]
#[serde(tag = "metric", rename_all = "kebab-case")]
pub enum MetricsCommand {
    /// Relative error between a condition and a generated tensor.
    Error {
        /// JSON {c11, c12, c44}.
        #[arg(long)]
        cond: String,
        /// JSON {c11, c12, c44}.
        #[arg(long)]
        gen: String,
        /// Ranges JSON {c11: {min, max}, ...}.
        #[arg(long)]
        ranges: PathBuf,
    },
    /// Largest similarity of a structure to a reference set.
    Novelty {
        #[arg(long)]
        sample: PathBuf,
        /// Reference .vxl files.
        #[arg(long, num_args = 1.., required = true)]
        refs: Vec<PathBuf>,
    },
    /// Pairwise similarity statistics of a set of structures.
    Diversity {
        #[arg(required = true, num_args = 2..)]
        files: Vec<PathBuf>,
    },
    /// Occupied-bin coverage of a manifest, with optional query and projection.
    Coverage {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 32)]
        bins: usize,
        /// Ranges JSON (default: min/max of the manifest).
        #[arg(long)]
        ranges: Option<PathBuf>,
        /// Normalized point JSON {c11, c12, c44, vol} to query.
        #[arg(long)]
        query: Option<String>,
        /// Also project the query point into the covered region.
        #[arg(long)]
        project: bool,
        /// Write the occupancy bitmap here.
        #[arg(long)]
        bitmap: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let result = commands::run(&cli);
    if let Err(e) = output::write_run_manifest(&cli, &result) {
        eprintln!("error: {}: {e}", e.name());
        return ExitCode::from(1);
    }
    match result {
        Ok(value) => {
            output::print(&value, cli.pretty);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::from(1)
        }
    }
}
