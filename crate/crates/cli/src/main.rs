mod commands;
mod error;
mod stream;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "cogload", version, about = "Cognitive load regression from EEG embeddings")]
struct Cli {
    /// Log filter (error, warn, info, debug, trace); RUST_LOG takes precedence.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Pipeline configuration (JSON); flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct PipelineArgs {
    /// toy, toy:<seed>, psd, emb1:<path>, tcp://host:port or stdio:<command>
    #[arg(long)]
    pub features: Option<String>,
    /// group_avg or intersection
    #[arg(long)]
    pub spatial: Option<String>,
    /// global, mean or mean_std
    #[arg(long)]
    pub temporal: Option<String>,
    /// linear, dnn or svm
    #[arg(long)]
    pub estimator: Option<String>,
    /// Comma-separated grid (lambda values or learning rates).
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub allow_custom_grid: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_cohort: Option<String>,
    /// Comma-separated training cohorts.
    #[arg(long)]
    pub train_cohorts: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub n_participants: usize,
    #[arg(long, default_value_t = 5)]
    pub n_days: usize,
    #[arg(long, default_value_t = 2)]
    pub trials_per_day: usize,
    #[arg(long, default_value_t = 32)]
    pub n_channels: usize,
    #[arg(long, default_value_t = 200.0)]
    pub fs: f64,
    #[arg(long, default_value_t = 92.0)]
    pub duration_s: f64,
    #[arg(long, default_value_t = 0.02)]
    pub noise_sigma: f64,
    #[arg(long)]
    pub planted_region: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ExplainArgs {
    /// Trained model (MDL1).
    #[arg(long)]
    pub model: PathBuf,
    /// Pipeline the model was trained with; defaults to pipeline.json beside the model.
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    /// global, participant or day
    #[arg(long, default_value = "global")]
    pub group_by: String,
    /// zero or channel_mean
    #[arg(long, default_value = "zero")]
    pub baseline: String,
    /// Use permutation sampling with this many permutations instead of exact values.
    #[arg(long)]
    pub permutations: Option<usize>,
    /// Which trials to explain: eval or all.
    #[arg(long, default_value = "eval")]
    pub trials: String,
    /// Explain at most this many trials.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Also write the per-day report with one topomap per day.
    #[arg(long)]
    pub daily: bool,
}

#[derive(Args, Debug, Clone)]
pub struct StreamArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    /// Montage name (cap26, cap28, cap32) or JSON file; chosen by channel count when absent.
    #[arg(long)]
    pub montage: Option<String>,
    /// Accept one TCP connection on this address instead of reading stdin.
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with a planted load signal.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Compute and store per-trial embeddings.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Nested cross-validation and final model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Nested cross-validation over growing training sets.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Participant groups added in order, e.g. "P01,P02;P03".
        #[arg(long)]
        increments: Option<String>,
    },
    /// Electrode relevance maps for a trained model.
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: ExplainArgs,
    },
    /// Render a relevance JSON file as an SVG scalp map.
    Topomap {
        #[command(flatten)]
        common: Common,
        /// Relevance map JSON.
        #[arg(long)]
        relevance: PathBuf,
        /// Montage name or JSON file for electrodes without coordinates.
        #[arg(long)]
        montage: Option<String>,
    },
    /// Score a live sample stream window by window.
    Stream {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: StreamArgs,
    },
}

fn setup_threads(common: &Common) -> Result<(), CliError> {
    if let Some(n) = common.parallelism {
        if n == 0 {
            return Err(CliError::config("--parallelism must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("--parallelism: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenSynth { common, synth } => {
            setup_threads(&common)?;
            commands::gen_synth(&common, &synth)
        }
        Command::Preprocess { common, pipeline } => {
            setup_threads(&common)?;
            commands::preprocess(&common, &pipeline)
        }
        Command::Eval { common, pipeline } => {
            setup_threads(&common)?;
            commands::eval(&common, &pipeline)
        }
        Command::Sweep {
            common,
            pipeline,
            increments,
        } => {
            setup_threads(&common)?;
            commands::sweep(&common, &pipeline, increments.as_deref())
        }
        Command::Explain { common, args } => {
            setup_threads(&common)?;
            commands::explain(&common, &args)
        }
        Command::Topomap {
            common,
            relevance,
            montage,
        } => commands::topomap(&common, &relevance, montage.as_deref()),
        Command::Stream { common, args } => {
            setup_threads(&common)?;
            stream::serve(&common, &args)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
