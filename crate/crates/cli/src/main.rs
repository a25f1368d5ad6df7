mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eet_core::EetError;
use eet_tensor::TensorError;

/// Environment variable naming the default dataset directory.
pub const DATA_ENV: &str = "EET_DATA_DIR";

#[derive(Parser, Debug)]
#[command(name = "eet", version, about = "Explicit expression transfer on synthetic glyph faces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a labelled dataset with a subject-disjoint train/test split.
    GenData(GenDataArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Swap the expressions of two image files.
    Transfer(TransferArgs),
    /// Score a trained model with the oracle protocol.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    CheckGrads(CheckGradsArgs),
    /// Print the header and array table of a checkpoint container.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub ids: usize,
    #[arg(long, default_value_t = 3)]
    pub poses: usize,
    #[arg(long, default_value_t = 60)]
    pub per_id: usize,
    #[arg(long, default_value_t = 32)]
    pub res: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated AU names, e.g. `brow_raise,brow_knit`.
    #[arg(long)]
    pub aus: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub levels: usize,
    #[arg(long, default_value_t = 0.3)]
    pub test_fraction: f64,
    /// Write into an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Key-value config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (default: config `data`, then $EET_DATA_DIR).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in --out if one exists.
    #[arg(long)]
    pub resume: bool,
    /// Stage-1 checkpoint to start stage 2 from.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Disable gradient clipping.
    #[arg(long)]
    pub no_clip: bool,
    /// Extra `key=value` config overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Stop after this many completed epochs (the run can be resumed later).
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `sheet.png` with inputs and outputs side by side.
    #[arg(long)]
    pub sheet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory whose test split is scored (default: $EET_DATA_DIR).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Partners drawn per test image.
    #[arg(long, default_value_t = 5)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Load trained oracles instead of training them.
    #[arg(long)]
    pub oracles: Option<PathBuf>,
    /// Save the oracles used for this run.
    #[arg(long)]
    pub save_oracles: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    pub same_pairs: usize,
    #[arg(long, default_value_t = 300)]
    pub diff_pairs: usize,
    /// Also score the unchanged-target, copied-source and re-render reference rows.
    #[arg(long)]
    pub baselines: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Layers,
    Losses,
    Full,
}

#[derive(Args, Debug)]
pub struct CheckGradsArgs {
    #[arg(long, value_enum, default_value_t = Scope::Full)]
    pub scope: Scope,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parameter coordinates sampled per module in the full-graph check.
    #[arg(long, default_value_t = 12)]
    pub per_module: usize,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Gradient checks above tolerance.
#[derive(Debug)]
pub struct GradientMismatch(pub usize);

impl std::fmt::Display for GradientMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient check(s) exceeded tolerance", self.0)
    }
}

impl std::error::Error for GradientMismatch {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<EetError>() {
            return match e {
                EetError::Config(_) => 2,
                EetError::Data(_) | EetError::Io { .. } | EetError::Checkpoint(_) => 3,
                EetError::NonFinite { .. } | EetError::Tensor(TensorError::NonFinite { .. }) => 4,
                EetError::OracleGate(_) => 5,
                EetError::Tensor(_) => 3,
            };
        }
        if cause.downcast_ref::<GradientMismatch>().is_some() {
            return 4;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Transfer(a) => commands::transfer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::CheckGrads(a) => commands::check_grads(&a),
        Command::InspectCheckpoint(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
