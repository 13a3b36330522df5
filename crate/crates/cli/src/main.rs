//! `saber`: generate scenes, train detectors, score and evaluate them.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use saber_core::{BaselineKind, Error, Variant};

#[derive(Parser, Debug)]
#[command(name = "saber", version, about = "Trajectory anomaly detection for highway scenes")]
struct Cli {
    /// Worker threads for per-scene scoring. Results keep input order.
    #[arg(long, global = true, default_value_t = 1, env = "SABER_JOBS")]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic train/test scene files.
    GenData(GenDataArgs),
    /// Train a detector on normal scenes.
    Train(TrainArgs),
    /// Write per-timestep anomaly scores for a scene file.
    Score(ScoreArgs),
    /// Compute AUROC, AUPR and FPR@95%TPR from scores or a checkpoint.
    Evaluate(EvaluateArgs),
    /// Write per-timestep latent coordinates as CSV.
    ExportLatent(ExportArgs),
    /// Convert MAAD-style coordinate/label arrays into a scene file.
    ImportMaad(ImportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// TOML with optional `[dataset]` and `[map]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the dataset seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config TOML; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scene file, or a directory holding `train.jsonl`.
    #[arg(long, env = "SABER_DATA_DIR")]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

/// Which detector to run: a trained checkpoint or a parameter-free baseline.
#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct DetectorArgs {
    /// Checkpoint file, or a training output directory (uses `best.json`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Parameter-free baseline; only `cvm` needs no training.
    #[arg(long)]
    pub baseline: Option<BaselineKind>,
}

#[derive(Args, Debug, Clone)]
pub struct WindowArgs {
    /// Training config TOML supplying window length, stride and radius.
    /// Defaults to `config.toml` beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Monte-Carlo draws for stochastic models; 0 scores the latent mean.
    #[arg(long, default_value_t = 0)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub score_seed: u64,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[command(flatten)]
    pub window: WindowArgs,
    /// Scene file, or a directory holding `test.jsonl`.
    #[arg(long, env = "SABER_DATA_DIR")]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// `scores.jsonl` from `score`, or its output directory.
    #[arg(long, conflicts_with_all = ["checkpoint", "baseline"])]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub baseline: Option<BaselineKind>,
    #[command(flatten)]
    pub window: WindowArgs,
    #[arg(long, env = "SABER_DATA_DIR")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Hold out this fraction of test scenes as a validation split and
    /// report it separately. Off by default.
    #[arg(long)]
    pub validation_split: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "SABER_DATA_DIR")]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    /// JSON array of sequences, or one sequence per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Map TOML; the default straight two-lane highway otherwise.
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub dt: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit codes. Usage errors exit with 2 from clap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum Exit {
    Failure = 1,
    Config = 3,
    Data = 4,
    Schema = 5,
    Checkpoint = 6,
    SingleClass = 7,
    NonFinite = 8,
    Io = 9,
}

impl Exit {
    fn name(self) -> &'static str {
        match self {
            Exit::Failure => "failure",
            Exit::Config => "config",
            Exit::Data => "data",
            Exit::Schema => "schema_mismatch",
            Exit::Checkpoint => "checkpoint",
            Exit::SingleClass => "single_class",
            Exit::NonFinite => "non_finite",
            Exit::Io => "io",
        }
    }

    fn classify(err: &anyhow::Error) -> Exit {
        for cause in err.chain() {
            if let Some(e) = cause.downcast_ref::<Error>() {
                return match e {
                    Error::Config(_) => Exit::Config,
                    Error::Parameter(_) | Error::SceneLoad { .. } | Error::Json { .. } => Exit::Data,
                    Error::SchemaVersion { .. } => Exit::Schema,
                    Error::Checkpoint(_) | Error::CheckpointMismatch { .. } => Exit::Checkpoint,
                    Error::SingleClass(_) => Exit::SingleClass,
                    Error::NonFinite(_) => Exit::NonFinite,
                    Error::Io { .. } => Exit::Io,
                };
            }
            if let Some(e) = cause.downcast_ref::<commands::CliError>() {
                return match e {
                    commands::CliError::MissingCheckpoint(_) => Exit::Checkpoint,
                    commands::CliError::Usage(_) => Exit::Config,
                };
            }
            if cause.is::<toml::de::Error>() {
                return Exit::Config;
            }
            if cause.is::<serde_json::Error>() {
                return Exit::Data;
            }
            if cause.is::<std::io::Error>() {
                return Exit::Io;
            }
        }
        Exit::Failure
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Score(a) => commands::score(&a, cli.jobs),
        Command::Evaluate(a) => commands::evaluate(&a, cli.jobs),
        Command::ExportLatent(a) => commands::export_latent(&a),
        Command::ImportMaad(a) => commands::import_maad(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let exit = Exit::classify(&err);
            let report = serde_json::json!({
                "error": exit.name(),
                "code": exit as u8,
                "message": format!("{err:#}"),
            });
            eprintln!("{report}");
            ExitCode::from(exit as u8)
        }
    }
}
