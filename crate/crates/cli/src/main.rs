mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use discom_core::Error;

#[derive(Parser)]
#[command(name = "discom", version, about = "Cross-modal distillation by representation disentanglement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON experiment config; missing keys take built-in defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run directory; defaults to the config's `output_dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dotted-key override applied after the config file, e.g. `optimizer.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Comma-separated run seeds, replacing `seeds` from the config.
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub seeds: Option<Vec<u64>>,
    /// Only warnings and errors on stderr, no summary on stdout.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Plan {
    /// Drop one loss term at a time, then the full model.
    Components,
    /// Task heads on z_inv only, z_inf only, then both.
    Representations,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset as a manifest plus tensor files.
    SynthData(Common),
    /// Jointly train both branches and keep the best single-modal models.
    TrainDiscom(Common),
    /// Train the teacher (fusion or single-modal, per `teacher.mode`).
    TrainTeacher(Common),
    /// Distill single-modal students from a trained teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Run directory holding `seed_<s>/teacher.ckpt`; defaults to `--out`.
        #[arg(long, value_name = "DIR")]
        teacher_dir: Option<PathBuf>,
    },
    /// Evaluate every checkpoint of a run directory on its test split.
    Eval(Common),
    /// Run an ablation matrix over the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Plan::Components)]
        plan: Plan,
    },
}

/// A failure and the exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::Config(_)) => 2,
            Failure::Core(Error::Divergence { .. }) => 4,
            Failure::Core(
                Error::Data(_)
                | Error::Format { .. }
                | Error::Dimension(_)
                | Error::Index(_)
                | Error::Split(_)
                | Error::Augment(_)
                | Error::Eval(_)
                | Error::Checkpoint(_)
                | Error::Version { .. }
                | Error::Io { .. }
                | Error::Csv(_),
            ) => 3,
            Failure::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

fn init_logging(quiet: bool) {
    let level = if quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = match &cli.command {
        Command::SynthData(c) | Command::TrainDiscom(c) | Command::TrainTeacher(c) | Command::Eval(c) => c.quiet,
        Command::Distill { common, .. } | Command::Ablate { common, .. } => common.quiet,
    };
    init_logging(quiet);
    let result = match cli.command {
        Command::SynthData(c) => commands::synth_data(&c),
        Command::TrainDiscom(c) => commands::train_discom(&c),
        Command::TrainTeacher(c) => commands::train_teacher(&c),
        Command::Distill { common, teacher_dir } => commands::distill(&common, teacher_dir.as_deref()),
        Command::Eval(c) => commands::eval(&c),
        Command::Ablate { common, plan } => commands::ablate(&common, plan),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("discom: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
