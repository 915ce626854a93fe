use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fggsl_core::model::BankKind;
use fggsl_core::{CandidateMode, KernelMode, Variant};

#[derive(Debug, Parser)]
#[command(name = "fggsl", version, about = "Frequency-guided graph structure learning")]
pub struct Cli {
    /// Log filter used when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on every split of a dataset and write reports and checkpoints.
    Train(RunArgs),
    /// Train the full model and its three ablations on the same splits.
    Ablate(AblateArgs),
    /// Bound probes, similarity histograms, filter responses and audits.
    #[command(subcommand)]
    Analyze(Analysis),
    /// Write a synthetic block-model dataset.
    Gen(GenArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON training config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory with nodes, edges and splits/.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train up to K splits concurrently.
    #[arg(long, value_name = "K")]
    pub parallel_splits: Option<usize>,
    #[arg(long, value_parser = parse_from_str::<Variant>)]
    pub variant: Option<Variant>,
    #[arg(long, value_parser = parse_from_str::<KernelMode>)]
    pub kernel_mode: Option<KernelMode>,
    /// full, given or knn:K
    #[arg(long, value_parser = parse_from_str::<CandidateMode>)]
    pub candidate: Option<CandidateMode>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Also train the feature-only MLP baseline.
    #[arg(long)]
    pub mlp: bool,
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Cosine-similarity histograms of raw features and, given a checkpoint,
    /// of the learned filter responses.
    Similarity(SimilarityArgs),
    /// Randomized check of the structural-loss stability inequality.
    Prop1(Prop1Args),
    /// Filter-bank distance under random Laplacian perturbations.
    Stability(StabilityArgs),
    /// Tabulate the kernel responses over [0, 2].
    Response(ResponseArgs),
    /// Edge counts and heterophily of the learned graphs.
    Audit(AuditArgs),
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "full", value_parser = parse_from_str::<CandidateMode>)]
    pub candidate: CandidateMode,
    /// Skip L1 row normalization of the features.
    #[arg(long)]
    pub raw_features: bool,
    #[arg(long, default_value_t = 20_000)]
    pub max_pairs: usize,
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Prop1Args {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Use this dataset's Laplacian instead of a random graph.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 0.3)]
    pub density: f64,
    /// Filter scales to probe.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    pub j: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.01")]
    pub epsilons: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value = "fig3", value_parser = parse_from_str::<KernelMode>)]
    pub kernel_mode: KernelMode,
    #[arg(long, value_enum, default_value_t = Bank::High)]
    pub kind: Bank,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ResponseArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Largest filter scale.
    #[arg(long = "J", default_value_t = 4)]
    pub max_scale: usize,
    #[arg(long, default_value = "fig3", value_parser = parse_from_str::<KernelMode>)]
    pub kernel_mode: KernelMode,
    #[arg(long, default_value_t = 201)]
    pub grid: usize,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "full", value_parser = parse_from_str::<CandidateMode>)]
    pub candidate: CandidateMode,
    #[arg(long)]
    pub raw_features: bool,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.005)]
    pub intra_p: f64,
    #[arg(long, default_value_t = 0.05)]
    pub inter_p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub splits: usize,
    #[arg(long, default_value_t = 0.6)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val_frac: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Bank {
    Low,
    High,
}

impl From<Bank> for BankKind {
    fn from(b: Bank) -> Self {
        match b {
            Bank::Low => BankKind::Low,
            Bank::High => BankKind::High,
        }
    }
}

fn parse_from_str<T>(s: &str) -> Result<T, String>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}
