//! `ddmc`: generate phantom data, train the staged pipeline, evaluate,
//! run ablation grids and render reports.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "ddmc", version, about = "Dual-domain multi-contrast MRI reconstruction")]
struct Cli {
    /// TOML run configuration; embedded defaults fill missing keys
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the global seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overwrite existing outputs instead of refusing
    #[arg(long, global = true)]
    force: bool,

    /// Log progress to stderr (repeat for debug output)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Print the default configuration and exit
    #[arg(long)]
    print_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-contrast dataset
    GenData {
        /// Output directory [default: paths.data_dir]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write sampling masks as text and PGM
    MakeMasks {
        /// Acceleration factors [default: plan.acceleration]
        #[arg(long, value_delimiter = ',')]
        accel: Vec<u32>,
        /// Output directory [default: <data_dir>/masks]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one stage (or all stages in order) with earlier stages frozen
    Train {
        /// synthesis, registration, reconstruction or all
        #[arg(long, default_value = "all")]
        stage: String,
        #[command(flatten)]
        io: RunIo,
    },
    /// Score every stage output of a trained run
    Eval {
        /// train, val or test
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        io: RunIo,
    },
    /// Train and evaluate every cell of a grid
    Ablate {
        /// Cell as domain,contrast,accel (e.g. dual,fused,4x); repeatable,
        /// or several separated by `;`
        #[arg(long, required = true)]
        grid: Vec<String>,
        /// Dataset directory [default: paths.data_dir]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory, one subdirectory per cell [default: paths.run_dir]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write magnitude images, error maps and per-panel metrics
    Render {
        #[arg(long, default_value = "test")]
        split: String,
        /// Number of records to render
        #[arg(long, default_value_t = 4)]
        records: usize,
        /// Error-map brightness gain
        #[arg(long, default_value_t = ddmc::evalkit::ERROR_MAP_GAIN)]
        gain: f64,
        /// Output directory [default: <run>/report]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory [default: paths.data_dir]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory holding checkpoints [default: paths.run_dir]
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunIo {
    /// Dataset directory [default: paths.data_dir]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for checkpoints and logs [default: paths.run_dir]
    #[arg(long)]
    run: Option<PathBuf>,
}

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Validation(_) => "validation",
            CliError::Io(_) => "io",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Io(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.message().replace('\n', " ");
        write!(f, "ddmc: error kind={} code={} message={:?}", self.kind(), self.code(), msg)
    }
}

impl From<ddmc::error::Error> for CliError {
    fn from(e: ddmc::error::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Io(e.to_string())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.print_defaults {
        print!("{}", RunConfig::default().to_toml());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Usage("no subcommand given (try --help)".into()));
    };
    let cfg = load_config(&cli)?;
    let ctx = commands::Ctx {
        cfg: cfg.resolved(),
        force: cli.force,
    };
    match command {
        Command::GenData { out } => ctx.gen_data(out.as_deref()),
        Command::MakeMasks { accel, out } => ctx.make_masks(accel, out.as_deref()),
        Command::Train { stage, io } => ctx.train(stage, io.data.as_deref(), io.run.as_deref()),
        Command::Eval { split, io } => ctx.eval(split, io.data.as_deref(), io.run.as_deref()),
        Command::Ablate { grid, data, out } => ctx.ablate(grid, data.as_deref(), out.as_deref()),
        Command::Render {
            split,
            records,
            gain,
            out,
            data,
            run,
        } => ctx.render(split, *records, *gain, data.as_deref(), run.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            let err = CliError::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{err}");
            return ExitCode::from(err.code());
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
