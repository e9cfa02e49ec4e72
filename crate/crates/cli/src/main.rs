//! `mpa`: synthesize data, train, evaluate and predict with multi-patch
//! aesthetics models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    Usage(String),
    /// Unreadable or invalid input data or checkpoints (exit 2).
    Data(String),
    /// Anything that fails while running (exit 3).
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<mpa_core::Error> for CliError {
    fn from(e: mpa_core::Error) -> Self {
        use mpa_core::Error as E;
        match e {
            E::InvalidParameter(_) => CliError::Usage(e.to_string()),
            E::ParseError { .. }
            | E::SchemaError { .. }
            | E::DecodeError { .. }
            | E::EmptyDataset(_)
            | E::InvalidHistogram(_)
            | E::Format(_)
            | E::PatchTooLarge { .. }
            | E::InputTooSmall { .. } => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "mpa",
    version,
    about = "Multi-patch aesthetics score prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic teacher-labeled dataset.
    Synth(SynthArgs),
    /// Train a scorer (pre-training and collective, or individual).
    #[command(after_help = config::RunConfig::reference())]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict the rating distribution and score of one image.
    Predict(PredictArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Smallest longer edge in pixels.
    #[arg(long, default_value_t = 64)]
    pub min_size: usize,
    /// Largest longer edge in pixels.
    #[arg(long, default_value_t = 128)]
    pub max_size: usize,
    /// Smallest height / width.
    #[arg(long, default_value_t = 0.4)]
    pub min_aspect: f64,
    /// Largest height / width.
    #[arg(long, default_value_t = 2.5)]
    pub max_aspect: f64,
}

/// Options shared by commands that read the run configuration.
#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// `key = value` file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = config::parse_assignment)]
    pub set: Vec<(String, String)>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub split_seed: Option<String>,
    #[arg(long)]
    pub s: Option<String>,
    #[arg(long)]
    pub p: Option<String>,
    #[arg(long)]
    pub g: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub out: Option<String>,
    /// One of the eight loss slugs, e.g. ind-emd or col-emd-log.
    #[arg(long)]
    pub loss: Option<String>,
    /// collective or individual; must agree with the loss.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_images: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// mp-random, mp-local, mp-globallocal or all.
    #[arg(long, default_value = "mp-globallocal")]
    pub strategy: String,
    /// Grid side(s) for the local strategies: `k` or `a..b`.
    #[arg(long)]
    pub m: Option<String>,
    /// Random patch count(s): `k` or `a..b`.
    #[arg(long)]
    pub n: Option<String>,
    /// train, validation or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Earlier report.json whose bucket MSE is the reduction-rate baseline.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// mp-random, mp-local or mp-globallocal.
    #[arg(long, default_value = "mp-globallocal")]
    pub strategy: String,
    /// Grid side (local strategies) or patch count (mp-random).
    #[arg(long, default_value_t = 2)]
    pub m: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
