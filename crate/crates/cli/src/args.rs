use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "twinspec", version, about = "Two-branch magnitude and complex spectrum speech enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the noisy/clean pairs of a manifest to WAV files.
    Mix(MixArgs),
    /// Train a model on the mixtures of a manifest.
    Train(TrainArgs),
    /// Enhance WAV files, or the mixtures of a manifest, with a checkpoint.
    Enhance(EnhanceArgs),
    /// Score noisy and enhanced mixtures with STOI and SI-SDR.
    Eval(EvalArgs),
    /// Write the cos(phase difference) map between two signals.
    PhaseDiff(PhaseDiffArgs),
    /// Print parameter counts of a configuration and its ablation variants.
    Params(ParamsArgs),
}

#[derive(Args, Debug, Clone, Copy, Default)]
pub struct AblationFlags {
    /// Drop the complex branch; the noisy phase is kept.
    #[arg(long)]
    pub no_phase: bool,
    /// Use plain convolution blocks instead of expert blocks.
    #[arg(long)]
    pub no_experts: bool,
    /// Do not feed magnitude-branch features into the complex branch.
    #[arg(long)]
    pub no_compensation: bool,
}

#[derive(Args, Debug)]
pub struct ManifestArgs {
    /// Tab-separated manifest: clean_path, noise_id, snr_db, seed, split.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Only use entries of this split; all entries when omitted.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Args, Debug)]
pub struct MixArgs {
    #[command(flatten)]
    pub manifest: ManifestArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Sample rate of generated and loaded audio.
    #[arg(long, default_value_t = 16000)]
    pub sample_rate: u32,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// key=value run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split to train on.
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Output directory for logs and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this training checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seeds both parameter initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[command(flatten)]
    pub ablation: AblationFlags,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory; files keep the input's name.
    #[arg(long)]
    pub out: PathBuf,
    /// Enhance the mixtures of this manifest instead of input files.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    pub split: Option<String>,
    /// Noisy WAV files.
    pub inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PhaseDiffArgs {
    /// Reference (clean) WAV file.
    #[arg(long)]
    pub reference: PathBuf,
    /// WAV file whose phase is compared with the reference. With
    /// `--checkpoint` this is the noisy input and the model's phase
    /// estimate is compared instead.
    #[arg(long)]
    pub estimate: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// CSV output: one row per frame, one column per frequency bin.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional grayscale PNG: -1 black, +1 white, low frequencies at the bottom.
    #[arg(long)]
    pub png: Option<PathBuf>,
    /// key=value configuration supplying the STFT settings when no checkpoint is given.
    #[arg(long, conflicts_with = "checkpoint")]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub ablation: AblationFlags,
}
