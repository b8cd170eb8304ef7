mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use erank_core::flowsim::Integrator;
use erank_core::initlab::Strategy;
use serde::Serialize;

/// Effective-rank diagnostics and projection-initialization experiments.
#[derive(Debug, Parser)]
#[command(name = "erank", version, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic activation dump.
    Synth(SynthArgs),
    /// Layer-wise eRank, token distinguishability and bounds for a dump.
    Analyze(AnalyzeArgs),
    /// Simulate projection-pair gradient flow and run the flow checks.
    Flow(FlowArgs),
    /// Train the linear autoencoder proxy with Adam.
    ProxyTrain(ProxyArgs),
    /// Score channels and select the top D′.
    Importance(ImportanceArgs),
    /// Verify that merged layers reproduce the wrapped forward pass.
    WidthMerge(MergeArgs),
    /// Run the full numerical check suite.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "erank-out")]
    pub out: PathBuf,
    /// Format of tabular outputs; summaries are always JSON.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Flat `key = value` file of defaults; flags override it.
    #[arg(long, value_name = "PATH")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileArg {
    Exponential,
    Isotropic,
    Collapse,
    Outlier,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// File name of the dump inside the output directory.
    #[arg(long, default_value = "synth.edad")]
    pub name: String,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub sequences: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, value_enum, default_value_t = ProfileArg::Exponential)]
    pub profile: ProfileArg,
    /// Decay rate of the exponential profile.
    #[arg(long, default_value_t = 0.15)]
    pub rate: f64,
    /// 0 keeps channels axis-aligned, 1 uses a random rotation.
    #[arg(long, default_value_t = 0.3)]
    pub mix: f64,
    #[arg(long)]
    pub postnorm: bool,
    /// Vocabulary size of the unembedding block; 0 omits it.
    #[arg(long, default_value_t = 0)]
    pub vocab: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dump: PathBuf,
    /// Require token distinguishability columns.
    #[arg(long)]
    pub tv: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitArg {
    Gaussian,
    Orthogonal,
    #[value(name = "channel_select")]
    ChannelSelect,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegratorArg {
    Euler,
    Rk4,
}

impl From<IntegratorArg> for Integrator {
    fn from(a: IntegratorArg) -> Self {
        match a {
            IntegratorArg::Euler => Integrator::Euler,
            IntegratorArg::Rk4 => Integrator::Rk4,
        }
    }
}

/// Where the data matrix comes from.
#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Dump to take the data from; synthetic data otherwise.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Stored layer of the dump; all sequences are stacked.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Strategy used to build channel-selection inits.
    #[arg(long, value_parser = parse_strategy, default_value = "mean_abs")]
    pub strategy: Strategy,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FlowArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Synthetic sample size.
    #[arg(long, default_value_t = 256)]
    pub tokens: usize,
    /// Synthetic hidden width.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Condition number of the synthetic covariance.
    #[arg(long, default_value_t = 200.0)]
    pub condition: f64,
    #[arg(long, default_value_t = 8)]
    pub dprime: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
    pub init: Vec<InitArg>,
    /// Standard deviation of Gaussian inits.
    #[arg(long, default_value_t = 0.02)]
    pub std: f64,
    #[arg(long, default_value_t = 0.05)]
    pub eta: f64,
    #[arg(long, default_value_t = 8000)]
    pub steps: usize,
    #[arg(long, default_value_t = 25)]
    pub record_every: usize,
    #[arg(long, value_enum, default_value_t = IntegratorArg::Euler)]
    pub integrator: IntegratorArg,
    /// Skip the flow checks.
    #[arg(long)]
    pub no_checks: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProxyArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 512)]
    pub tokens: usize,
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    #[arg(long, default_value_t = 64)]
    pub dprime: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
    pub init: Vec<InitArg>,
    #[arg(long, default_value_t = 0.02)]
    pub std: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Weight of the orthogonality penalty.
    #[arg(long, default_value_t = 0.0)]
    pub penalty: f64,
    /// Re-center and normalize before measuring eRank.
    #[arg(long)]
    pub recenter: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ImportanceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long, value_parser = parse_strategy, default_value = "mean_abs")]
    pub strategy: Strategy,
    #[arg(long)]
    pub dprime: usize,
    /// Also report the overlap between selections from each dump half.
    #[arg(long)]
    pub split_check: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MergeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Weights file; random layers otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Write the layers used to this file.
    #[arg(long)]
    pub save_weights: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub dprime: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 24)]
    pub ffn: usize,
    #[arg(long, default_value_t = 8)]
    pub tokens: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CheckArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse::<Strategy>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args = match config::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Flow(a) => commands::flow(a),
        Command::ProxyTrain(a) => commands::proxy_train(a),
        Command::Importance(a) => commands::importance_cmd(a),
        Command::WidthMerge(a) => commands::width_merge(a),
        Command::Check(a) => commands::check(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
