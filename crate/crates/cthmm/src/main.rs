//! Thin command-line front end over the library: configuration loading,
//! overrides, and exit-code mapping.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cthmm::io::{self, RunConfig};

#[derive(Parser)]
#[command(
    name = "cthmm",
    version,
    about = "Continuous-time hidden Markov modeling of irregular categorical event sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic cohort from a parameters file
    Simulate(CommonArgs),
    /// Fit model parameters to a timeline CSV by EM
    Fit(CommonArgs),
    /// Posterior state marginals and most probable state per observation
    Decode(CommonArgs),
    /// State-occupancy curves on a time grid, plus the horizon transition matrix
    Occupancy(CommonArgs),
    /// Emission probability table by state and previous event
    ReportEmissions(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (key = value lines)
    #[arg(long)]
    config: PathBuf,
    /// Override the RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of hidden states
    #[arg(long)]
    states: Option<usize>,
    /// Override the horizon in years
    #[arg(long)]
    horizon: Option<f64>,
    /// Override the primary output path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Write probabilities at full precision instead of two decimals
    #[arg(long)]
    full_precision: bool,
}

fn load_config(args: &CommonArgs) -> cthmm::Result<RunConfig> {
    let mut config = RunConfig::from_file(&args.config)?;
    config.apply_overrides(args.seed, args.states, args.horizon, args.out.clone());
    Ok(config)
}

fn run(command: &Command) -> cthmm::Result<()> {
    match command {
        Command::Simulate(args) => io::cmd_simulate(&load_config(args)?),
        Command::Fit(args) => io::cmd_fit(&load_config(args)?),
        Command::Decode(args) => io::cmd_decode(&load_config(args)?),
        Command::Occupancy(args) => io::cmd_occupancy(&load_config(args)?),
        Command::ReportEmissions(args) => {
            let mut config = load_config(&args.common)?;
            if args.full_precision {
                config.full_precision = true;
            }
            io::cmd_report_emissions(&config)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{err}");
                return ExitCode::SUCCESS;
            }
            eprint!("{err}");
            return ExitCode::from(1);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
