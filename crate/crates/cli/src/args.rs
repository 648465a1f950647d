use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ppanns_core::attacks::Variant;

/// Privacy-preserving approximate nearest neighbour search.
///
/// Owner commands: keygen, encrypt-db, build-index, tune-beta.
/// User commands: trapgen. Server commands: search.
#[derive(Debug, Parser)]
#[command(name = "ppanns", version)]
pub struct Cli {
    /// Master seed. Overrides `seed` from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for encryption and ground truth. PPANN_THREADS takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// TOML file with run settings; keys mirror the bench configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate owner keys into an artifact directory.
    Keygen(KeygenArgs),
    /// Encrypt the base vectors under both schemes.
    EncryptDb(DirData),
    /// Build the HNSW index over the SAP ciphertexts.
    BuildIndex(BuildIndexArgs),
    /// Encrypt queries into request files.
    Trapgen(TrapgenArgs),
    /// Answer request files using only server artifacts.
    Search(SearchArgs),
    /// Recall and QPS sweep over the Ratio_k and ef_search grids.
    Bench(BenchArgs),
    /// Find β for a target filter-only recall.
    TuneBeta(TuneBetaArgs),
    /// Find the smallest Ratio_k reaching a target recall.
    TuneKprime(TuneKPrimeArgs),
    /// Known-plaintext attack on one ASPE variant.
    AttackDemo(AttackArgs),
}

/// Dataset selection. Without `--base` the synthetic generator is used.
#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Base vectors (fvecs).
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Query vectors (fvecs).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Ground truth ids (ivecs).
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Synthetic base size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Synthetic dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Synthetic query count.
    #[arg(long)]
    pub num_queries: Option<usize>,
    /// Neighbours per query.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DirData {
    /// Artifact directory.
    #[arg(long)]
    pub dir: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    #[command(flatten)]
    pub target: DirData,
    /// SAP scaling factor.
    #[arg(long)]
    pub s: Option<f64>,
    /// Fixed β; tuned on the queries when omitted.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Filter-only recall targeted when tuning β.
    #[arg(long)]
    pub target_recall: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    /// Artifact directory.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub ef_construction: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrapgenArgs {
    #[command(flatten)]
    pub source: DirData,
    /// Output directory for request files.
    #[arg(long)]
    pub out: PathBuf,
    /// Filter candidates per query; defaults to 4k.
    #[arg(long)]
    pub k_prime: Option<usize>,
    /// Beam width; defaults to max(k′, 64).
    #[arg(long)]
    pub ef_search: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Artifact directory. Only server artifacts are read.
    #[arg(long)]
    pub dir: PathBuf,
    /// Directory of request files.
    #[arg(long)]
    pub requests: PathBuf,
    /// Output directory for response files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Artifact directory, reused when it already holds a manifest.
    #[arg(long)]
    pub artifacts: Option<PathBuf>,
    /// Comma-separated ef_search grid.
    #[arg(long, value_delimiter = ',')]
    pub ef_grid: Option<Vec<usize>>,
    /// Comma-separated Ratio_k grid.
    #[arg(long, value_delimiter = ',')]
    pub ratio_grid: Option<Vec<usize>>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Write the CSV report here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneBetaArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub target_recall: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TuneKPrimeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Recall@k to reach.
    #[arg(long, default_value_t = 0.9)]
    pub target_recall: f64,
    #[arg(long, value_delimiter = ',')]
    pub ef_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub ratio_grid: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// linear, exp, log or square.
    #[arg(long, default_value = "linear")]
    pub variant: Variant,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Database vectors to recover besides the leaked ones.
    #[arg(long, default_value_t = 10)]
    pub targets: usize,
    /// Gaussian noise added to every observed leak.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}
