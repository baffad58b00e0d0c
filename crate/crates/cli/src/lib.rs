//! Command-line front end for the steering engine.

pub mod commands;
pub mod config;
pub mod error;
pub mod serve;

use std::path::PathBuf;

use anyhow::Result;
use chameleon_core::directions::DirectionMethod;
use chameleon_core::editing::EditMode;
use chameleon_core::Task;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "chameleon", version, about = "Personalization steering for LLM activations")]
pub struct Cli {
    /// TOML pipeline configuration; flags override it, CHAMELEON_* variables override both.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Append every model exchange to this JSON Lines file.
    #[arg(long, global = true, conflicts_with = "replay")]
    pub record: Option<PathBuf>,
    /// Serve model exchanges from a recorded file instead of the network.
    #[arg(long, global = true)]
    pub replay: Option<PathBuf>,
    #[arg(long, global = true)]
    pub base_url: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Provider {
    /// Deterministic hash embeddings, no network.
    Mock,
    /// The configured embeddings endpoint.
    Remote,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Embedding provider; defaults to `mock` with --mock and `remote` otherwise.
    #[arg(long, value_enum)]
    pub provider: Option<Provider>,
    /// Width of mock embeddings.
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of principal components used for ranking (defaults to k).
    #[arg(long)]
    pub k_pca: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rank a user's history and keep the top k items.
    SelectHistory {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        embed: EmbedArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate insights and preference pairs for every query.
    GenPrefs {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
        /// Use the offline mock model.
        #[arg(long)]
        mock: bool,
        /// JSON array of {"contains", "response"} rules for the mock.
        #[arg(long, requires = "mock")]
        mock_script: Option<PathBuf>,
        /// Truncate insights to this many characters in pair prompts.
        #[arg(long)]
        max_insight_chars: Option<usize>,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Fit per-layer directions and write a steering profile.
    Fit {
        #[arg(long)]
        prefs: PathBuf,
        #[arg(long)]
        activations: PathBuf,
        #[arg(long)]
        method: Option<DirectionMethod>,
        /// Number of layers to select.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        edit_mode: Option<EditMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a profile to the query activations of a bundle.
    Edit {
        #[arg(long)]
        activations: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        /// Output directory for the edited layer_*_X.act files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against golds.
    Eval {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic world, fit, edit and score it.
    Simulate(SimulateArgs),
    /// Serve POST /v1/edit over HTTP.
    Serve {
        /// Directory of profile JSON files; each is addressed by its file stem.
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Port to bind; 0 picks a free one.
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Merge several users' corpora into one group corpus.
    Aggregate {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        group_id: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    pub users: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    /// Class separation in units of the noise scale.
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 4)]
    pub layers: u32,
    #[arg(long, default_value_t = 2)]
    pub signal_layer: u32,
    /// How far the neutral offset points against the preference direction.
    #[arg(long, default_value_t = 1.0)]
    pub overlap: f64,
    /// Share of preference directions common to all users.
    #[arg(long, default_value_t = 0.0)]
    pub cohesion: f64,
    #[arg(long, default_value_t = 100)]
    pub queries: usize,
    #[arg(long)]
    pub method: Option<DirectionMethod>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub edit_mode: Option<EditMode>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    commands::dispatch(cli)
}
