use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "magicmix", version, about = "Semantic mixing with a small conditional diffusion model")]
pub struct Cli {
    /// Worker threads for data-parallel work (defaults to all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the procedural shapes dataset and fit the attribute classifier.
    GenData(GenDataArgs),
    /// Train a denoiser on a shapes dataset.
    Train(TrainArgs),
    /// Plain conditional generation.
    Sample(SampleArgs),
    /// Image-text mixing: layout from an image, content from a prompt.
    Mix(MixArgs),
    /// Text-text mixing: layout from a generated trajectory.
    MixTt(MixArgs),
    /// Concept removal: mixing with a negatively scaled content token.
    Remove(MixArgs),
    /// Grid of mixing runs over nu, k_min_frac, k_max_frac and scale.
    Sweep(SweepArgs),
    /// Summarize a checkpoint, dataset, array file or run manifest.
    Inspect(InspectArgs),
    /// Compare the oracle score with finite differences of its log density.
    OracleCheck(OracleCheckArgs),
    /// Re-execute a run manifest and compare output hashes.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub count_per_class: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    /// Comma-separated subset of shapes (default: all).
    #[arg(long, value_delimiter = ',')]
    pub shapes: Vec<String>,
    /// Comma-separated subset of textures (default: all).
    #[arg(long, value_delimiter = ',')]
    pub textures: Vec<String>,
    #[arg(long, default_value_t = 7)]
    pub classifier_seed: u64,
    #[arg(long)]
    pub no_classifier: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// The reference configuration.
    Shapes,
    /// A few thousand parameters, for smoke tests.
    Tiny,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training config document (JSON); flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Arch::Shapes)]
    pub arch: Arch,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub null_prob: Option<f64>,
    #[arg(long)]
    pub attribute_drop_prob: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub log_every: Option<u64>,
    /// EMA decay; 0 disables the average.
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// Samples in the held-out loss estimate written to eval.json.
    #[arg(long, default_value_t = 256)]
    pub eval_batch: usize,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = magicmix_core::sampler::DEFAULT_INFERENCE_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    #[arg(long, default_value_t = magicmix_core::magicmix::DEFAULT_GUIDANCE)]
    pub guidance_weight: f64,
}

/// `MixConfig` fields, one flag each; unset flags keep the config document's
/// value (or the default).
#[derive(Debug, Args, Default)]
pub struct MixConfigFlags {
    #[arg(long, visible_alias = "kmax")]
    pub k_max_frac: Option<f64>,
    #[arg(long, visible_alias = "kmin")]
    pub k_min_frac: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub guidance_weight: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `shared-eps` or `ddim-inversion`.
    #[arg(long)]
    pub layout_noise_mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct LayoutFlags {
    /// Layout image (grayscale PNG).
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Dataset directory for `--index`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Dataset image used as the layout.
    #[arg(long)]
    pub index: Option<usize>,
    /// Layout prompt (text-text mixing).
    #[arg(long)]
    pub layout: Option<String>,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Request document (JSON) shared with the service; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub layout: LayoutFlags,
    /// Content prompt, `word[:scale]` tokens.
    #[arg(long)]
    pub content: Option<String>,
    #[command(flatten)]
    pub mix: MixConfigFlags,
    /// Also write the denoising trajectory and layout noises.
    #[arg(long)]
    pub record_trajectory: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub layout: LayoutFlags,
    #[arg(long)]
    pub content: Option<String>,
    /// Axis as `start:stop:step` or a comma list.
    #[arg(long)]
    pub nu: Option<String>,
    #[arg(long, visible_alias = "kmin")]
    pub k_min_frac: Option<String>,
    #[arg(long, visible_alias = "kmax")]
    pub k_max_frac: Option<String>,
    /// Attention scale axis for the content prompt's attribute token.
    #[arg(long)]
    pub scale: Option<String>,
    #[arg(long)]
    pub guidance_weight: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Seed of the first cell; cell `i` uses `seed + i`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layout_noise_mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
    /// Also write summary.json and a run manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleCheckArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// World description document; random worlds when absent.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 8])]
    pub dimensions: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    pub probes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A run manifest or the directory holding one.
    pub manifest: PathBuf,
    /// Where to write the re-executed outputs.
    #[arg(long)]
    pub out: PathBuf,
}
