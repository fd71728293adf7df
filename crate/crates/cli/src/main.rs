//! `slogd`: simulate data, train the four networks, separate, localize and
//! evaluate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use slogd::models::Stage;
use slogd::pipeline::{DoaSource, MaskSource};
use slogd::scene::Split;

use commands::Input;
use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] slogd::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Core(e) if e.is_user_error() => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "slogd", version, about = "Localization-guided deflation for two-speaker separation")]
#[command(after_help = "Relative artifact paths (--out, --data, --results, --checkpoints) are resolved against \
the configured output_root, which the SLOGD_OUTPUT_ROOT environment variable overrides.")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Doa1,
    Mask1,
    Doa2,
    Mask2,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Dev => Some(Split::Dev),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DoaArg {
    Neural,
    GccPhat,
    Oracle,
}

impl From<DoaArg> for DoaSource {
    fn from(d: DoaArg) -> Self {
        match d {
            DoaArg::Neural => DoaSource::Neural,
            DoaArg::GccPhat => DoaSource::GccPhat,
            DoaArg::Oracle => DoaSource::Oracle,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MaskArg {
    Neural,
    Oracle,
}

#[derive(Debug, clap::Args)]
#[group(required = true, multiple = false)]
struct InputArgs {
    /// Multichannel mixture WAV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a simulated two-speaker dataset and its manifest.
    Simulate {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// Corpus with one subdirectory of WAV files per speaker.
        #[arg(long)]
        corpus_dir: Option<PathBuf>,
        #[arg(long)]
        noise_dir: Option<PathBuf>,
    },
    /// Train the networks in order; each stage needs its upstream checkpoints.
    Train {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        #[arg(long, default_value = "checkpoints")]
        out: PathBuf,
        /// Continue from the last saved training state.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Separate a mixture, or every scene of a dataset split.
    Separate {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum)]
        doa: Option<DoaArg>,
        #[arg(long, value_enum)]
        mask: Option<MaskArg>,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Estimate the dominant speaker's DOA.
    Localize {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "gcc-phat")]
        method: DoaArg,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long, default_value = "localize")]
        out: PathBuf,
    },
    /// Score separation outputs against the dataset's ground truth.
    Evaluate {
        #[arg(long, default_value = "results")]
        results: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Also write per-scene metric arrays for plotting.
        #[arg(long)]
        emit_plot_data: bool,
    },
}

fn input<'a>(args: &'a InputArgs, split: SplitArg) -> Input<'a> {
    match (&args.input, &args.data) {
        (Some(p), _) => Input::Wav(p),
        (None, Some(d)) => Input::Dataset {
            data: d,
            split: split.split(),
        },
        (None, None) => unreachable!("clap requires one input"),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Simulate {
            count,
            corpus_dir,
            noise_dir,
            ..
        } => {
            if let Some(c) = count {
                cfg.simulate.count = *c;
            }
            if corpus_dir.is_some() {
                cfg.simulate.corpus_dir = corpus_dir.clone();
            }
            if noise_dir.is_some() {
                cfg.simulate.noise_dir = noise_dir.clone();
            }
        }
        Command::Train { epochs, lr, .. } => {
            if let Some(e) = epochs {
                cfg.train.max_epochs = *e;
            }
            if let Some(lr) = lr {
                cfg.train.lr = *lr;
            }
        }
        Command::Separate { doa, mask, .. } => {
            if let Some(d) = doa {
                cfg.pipeline.doa = (*d).into();
            }
            if let Some(m) = mask {
                cfg.pipeline.mask = match m {
                    MaskArg::Neural => MaskSource::Neural,
                    MaskArg::Oracle => MaskSource::Oracle,
                };
            }
        }
        _ => {}
    }
    let cfg = cfg.resolve(cli.seed)?;
    match &cli.command {
        Command::Simulate { out, .. } => commands::simulate(&cfg, out),
        Command::Train {
            data,
            stage,
            out,
            resume,
            ..
        } => {
            let stages: Vec<Stage> = match stage {
                StageArg::Doa1 => vec![Stage::Doa1],
                StageArg::Mask1 => vec![Stage::Mask1],
                StageArg::Doa2 => vec![Stage::Doa2],
                StageArg::Mask2 => vec![Stage::Mask2],
                StageArg::All => Stage::ORDER.to_vec(),
            };
            commands::train(&cfg, data, out, &stages, *resume)
        }
        Command::Separate {
            input: i,
            split,
            checkpoints,
            out,
            ..
        } => commands::run_separate(&cfg, input(i, *split), checkpoints.as_deref(), out),
        Command::Localize {
            input: i,
            split,
            method,
            checkpoints,
            out,
        } => commands::localize(&cfg, input(i, *split), (*method).into(), checkpoints.as_deref(), out),
        Command::Evaluate {
            results,
            data,
            split,
            out,
            emit_plot_data,
        } => {
            let Some(split) = split.split() else {
                return Err(CliError::Config("evaluate needs a single split".into()));
            };
            commands::evaluate(&cfg, results, data, split, out, *emit_plot_data)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
