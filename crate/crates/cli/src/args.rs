use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

/// Low-frequency noise modulation laboratory.
///
/// Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 numerical
/// failure (including a verification that did not pass).
#[derive(Debug, Parser)]
#[command(name = "lens", version, about, long_about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic latent samples for basis extraction.
    Samples(SamplesArgs),
    /// Extract a patch PCA basis from a samples file.
    Basis(BasisArgs),
    /// Write a world manifest (generator, prompts and reward seeds).
    World(WorldArgs),
    /// Train the modulation network on a world.
    Train(TrainArgs),
    /// Paired evaluation of a checkpoint against unmodulated noise.
    Eval(EvalArgs),
    /// Run one verification suite and write a JSON report.
    Verify(VerifyArgs),
    /// Count, time and fit multiply-adds of the network.
    Bench(BenchArgs),
    /// Train one model per setting of k, s or layer count and compare.
    Ablate(AblateArgs),
    /// Re-run the command recorded in a manifest and check its artifacts are
    /// bit-identical.
    Replay(ReplayArgs),
}

#[derive(Debug, clap::Args)]
pub struct SamplesArgs {
    /// Number of latents.
    #[arg(long, default_value_t = 512)]
    pub count: usize,
    /// Latent channels C.
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    /// Latent height H.
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    /// Latent width W.
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output samples file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct BasisArgs {
    /// Samples file written by `lens samples`.
    #[arg(long)]
    pub samples: PathBuf,
    /// Patch side s; must divide H and W.
    #[arg(long)]
    pub patch_size: usize,
    /// Retained low-frequency coefficients k.
    #[arg(long)]
    pub k: usize,
    /// Output basis file; a JSON sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WorldKindArg {
    /// MLP generator on the whole latent with the four-term reward.
    Generic,
    /// Generator reads the first j PCA coefficients of each patch.
    Lowfreq,
    /// Generator reads only the last PCA coefficient of each patch.
    Highfreq,
    /// Identity generator with r = -||x||^2 / 2.
    Isotropic,
    /// Identity generator with a per-prompt linear reward.
    Linear,
}

#[derive(Debug, clap::Args)]
pub struct WorldArgs {
    /// World kind [default: lowfreq, or the kind in --config].
    #[arg(long, value_enum)]
    pub kind: Option<WorldKindArg>,
    /// Coefficients read by a low-frequency world.
    #[arg(long, default_value_t = 8)]
    pub j: usize,
    /// Basis fixing the geometry (required for lowfreq and highfreq).
    #[arg(long)]
    pub basis: Option<PathBuf>,
    /// Base world config JSON; flags override its kind and seed.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// World seed [default: 0, or the seed in --config].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output world manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// World manifest.
    #[arg(long)]
    pub world: PathBuf,
    /// Basis file.
    #[arg(long)]
    pub basis: PathBuf,
    /// Training config JSON; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoint, metrics and reports.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// World manifest.
    #[arg(long)]
    pub world: PathBuf,
    /// Basis file.
    #[arg(long)]
    pub basis: PathBuf,
    /// Checkpoint written by `lens train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Noise draws per prompt.
    #[arg(long, default_value_t = 64)]
    pub n_noise: usize,
    /// Seed of the evaluation noise.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output report JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// Grid-quadrature check of the low-frequency tilting KL bound.
    Prop1,
    /// Stein's identity on analytic maps and random networks.
    Stein,
    /// Quadratic KL approximation for linear residual maps.
    Kl,
    /// Reward-offset invariance of the training objective.
    Objective,
    /// Gradient energy spectra of the low-frequency and isotropic worlds.
    Spectrum,
    /// MAC count fit and parameter budget.
    Bench,
}

#[derive(Debug, clap::Args)]
pub struct VerifyArgs {
    /// Suite to run.
    #[arg(long, value_enum)]
    pub suite: Suite,
    /// Output report JSON; spectrum also writes CSVs next to it.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Suite seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Monte Carlo samples (stein, kl) or images (spectrum).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Basis for objective and spectrum; a synthetic one is extracted if omitted.
    #[arg(long)]
    pub basis: Option<PathBuf>,
    /// Low-frequency cutoff for the spectrum suite.
    #[arg(long, default_value_t = 8)]
    pub j: usize,
}

#[derive(Debug, clap::Args)]
pub struct BenchArgs {
    /// Output report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Token counts N of the grid.
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64])]
    pub tokens: Vec<usize>,
    /// Hidden widths h of the grid.
    #[arg(long, value_delimiter = ',', default_values_t = [32, 64, 128])]
    pub hidden: Vec<usize>,
    /// Coefficients k per token.
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    /// Timed repetitions per config.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateDim {
    /// Retained coefficients, default d/8, d/4, d/2, d.
    K,
    /// Patch size over the divisors of H (needs --samples).
    S,
    /// Transformer depth, default 1, 2, 4.
    Layers,
}

#[derive(Debug, clap::Args)]
pub struct AblateArgs {
    /// Dimension to sweep.
    #[arg(long, value_enum)]
    pub dim: AblateDim,
    /// World manifest used as the template for every setting.
    #[arg(long)]
    pub world: PathBuf,
    /// Basis file (k and layer sweeps).
    #[arg(long)]
    pub basis: Option<PathBuf>,
    /// Samples file, needed to extract one basis per s.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Training config JSON shared by all settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Explicit setting values instead of the default sweep.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<usize>>,
    /// Held-out noise draws per prompt for the final comparison.
    #[arg(long, default_value_t = 64)]
    pub n_noise: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct ReplayArgs {
    /// Manifest written by an earlier command.
    pub manifest: PathBuf,
}
