mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use looprecon::eval::CameraSource;
use looprecon::train::KSamplerKind;
use looprecon::BlockVariant;

/// Looped multi-view reconstruction: synthetic data, training, evaluation
/// and diagnostics.
///
/// Config keys can be overridden with LOOPRECON_<SECTION>_<KEY>=value
/// (for example LOOPRECON_OPTIM_LR=1e-3); command-line flags win over both.
#[derive(Parser, Debug)]
#[command(name = "looprecon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic scenes and a shard manifest.
    GenData(GenDataArgs),
    /// Train stage 1, or stage 2 from a stage-1 checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Diagnostics: trace, probe, sweep or earlystop.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: Option<bool>,
    /// decoupled, shared, shared_residual_gates or shared_state_gate.
    #[arg(long)]
    pub block_variant: Option<BlockVariant>,
    /// fixed or beta.
    #[arg(long)]
    pub k_sampler: Option<KSamplerKind>,
    /// Inference step count.
    #[arg(long)]
    pub k_inf: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Output directory for scene files and manifest.toml.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory: checkpoint.djvc, train.log, config.toml.
    #[arg(long)]
    pub out: PathBuf,
    /// 1 or 2. Stage 2 needs --resume pointing at a stage-1 checkpoint.
    #[arg(long)]
    pub stage: Option<u8>,
    /// Checkpoint to continue from (or to start stage 2 from).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for eval_k<K>.json.
    #[arg(long)]
    pub out: PathBuf,
    /// rays (default) or head.
    #[arg(long, default_value = "rays")]
    pub camera_source: CameraSource,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// trace, probe, sweep or earlystop.
    #[arg(long)]
    pub mode: String,
    #[arg(long, default_value = "rays")]
    pub camera_source: CameraSource,
    /// Scene index (across shards) for trace and probe.
    #[arg(long, default_value_t = 0)]
    pub scene: usize,
    /// Probe query view.
    #[arg(long, default_value_t = 0)]
    pub query_view: usize,
    /// Probe query patch; defaults to the center patch.
    #[arg(long)]
    pub query_patch: Option<usize>,
    /// Probe iterations (0-based); defaults to all.
    #[arg(long, value_delimiter = ',')]
    pub iterations: Vec<usize>,
    /// Sweep step counts; defaults to 1..=k_inf.
    #[arg(long, value_delimiter = ',')]
    pub ks: Vec<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Analyze(a) => commands::analyze(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
