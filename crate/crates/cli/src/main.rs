//! `promax` command-line driver. Each subcommand is one pipeline stage that
//! reads and writes files under the run directory given by `--out`.

mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "promax", version, about = "Profile-guided augmentation and distribution shaping for recommenders")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every stage derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Rerun a stage even if up to date, and accept modified inputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a cluster-structured synthetic dataset with profile embeddings.
    Synth(SynthArgs),
    /// Project profile embeddings onto their principal components.
    Compress(CompressArgs),
    /// Split interactions, retrieve candidates and build augmented histories.
    Retrieve(RetrieveArgs),
    /// Train a recommender.
    Train(TrainArgs),
    /// Evaluate a trained run.
    Eval(EvalArgs),
    /// Compare two sets of per-seed evaluation reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub clusters: usize,
    #[arg(long)]
    pub users_per: usize,
    #[arg(long)]
    pub items_per: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Profile embedding dimension.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// User profile embeddings (default: <out>/data/user_embeddings.pmeb).
    #[arg(long)]
    pub users: Option<PathBuf>,
    #[arg(long)]
    pub items: Option<PathBuf>,
    #[arg(long)]
    pub kappa: Option<usize>,
    /// joint | per_side
    #[arg(long)]
    pub pca_mode: Option<String>,
    #[arg(long)]
    pub pre_normalize: bool,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Interaction TSV (default: <out>/data/interactions.tsv).
    #[arg(long)]
    pub interactions: Option<PathBuf>,
    /// `id<TAB>text` profile files passed to a remote reranker.
    #[arg(long)]
    pub user_profiles: Option<PathBuf>,
    #[arg(long)]
    pub item_profiles: Option<PathBuf>,
    #[arg(long)]
    pub k_users: Option<usize>,
    #[arg(long)]
    pub pool_cap: Option<usize>,
    /// deterministic | remote
    #[arg(long)]
    pub reranker: Option<String>,
    #[arg(long)]
    pub rerank_url: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// mf | lightgcn
    #[arg(long)]
    pub encoder: Option<String>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub reg: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// cosine | dot
    #[arg(long)]
    pub theta_sim: Option<String>,
    /// Run name (default derived from encoder, weights and seed).
    #[arg(long)]
    pub run: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run name; may be omitted when exactly one run exists.
    #[arg(long)]
    pub run: Option<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Print U1-U4 rows.
    #[arg(long)]
    pub by_group: bool,
    /// Also write per-user metrics as CSV.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Baseline and treatment reports: JSON files or directories of them.
    #[arg(long, num_args = 2, value_names = ["BASE", "PROMAX"], required = true)]
    pub compare: Vec<PathBuf>,
    /// Expected number of paired seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match stages::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
