use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "ssdc", version, about = "Spectral decoupling toolkit and toy transfer benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split an image into invariant and specific parts.
    Decompose {
        /// PGM or PPM input; colour images are averaged to one channel.
        image: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Hard-mode Gaussian width (overrides the config).
        #[arg(long)]
        sigma_h: Option<f64>,
        /// Weights for soft or free mode (checkpoint stem).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the band-pass bank for a square field.
    Filterbank {
        #[command(flatten)]
        run: RunArgs,
        /// Number of filters (overrides the config).
        #[arg(long)]
        n_filters: Option<usize>,
        /// Side of the field; defaults to the configured image size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Burn-in then mutual learning.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// One training run per value of one axis.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<f64>,
    },
    /// Score saved weights on the target evaluation split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint stem (`<stem>.bin` and `<stem>.json`).
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base settings when no config file is given.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub no_said: bool,
    #[arg(long)]
    pub no_coupling: bool,
    #[arg(long)]
    pub no_ssm: bool,
    /// Plain detector trained on the source only.
    #[arg(long)]
    pub source_only: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Default,
    Benchmark,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Hard,
    Soft,
    Free,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    FilterCount,
    K,
    LambdaDcp,
    SsmStep,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SSDC_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Decompose {
            image,
            run,
            sigma_h,
            checkpoint,
        } => commands::decompose(&image, &run, sigma_h, checkpoint.as_deref()),
        Command::Filterbank { run, n_filters, size } => commands::filterbank(&run, n_filters, size),
        Command::Train { run } => commands::train(&run),
        Command::Sweep { run, axis, values } => commands::sweep(&run, axis, &values),
        Command::Eval { run, checkpoint } => commands::eval(&run, &checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
