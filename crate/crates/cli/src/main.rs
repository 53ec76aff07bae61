use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use polymfvi_cli::config::Experiment;
use polymfvi_cli::{execute, load_config, CliError};

#[derive(Parser)]
#[command(name = "polymfvi", about = "Mean-field VI over polyhedral sets of transport maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: `out` in the config, else `./out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named in the config.
    Run { config: PathBuf },
    /// Mesh-halving approximation errors for a built-in monotone map.
    Approx { config: PathBuf },
    /// Particle flow over a mixture of product measures.
    Mixtures { config: PathBuf },
    /// Print the version.
    Version,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (path, implied) = match cli.command {
        Command::Version => {
            println!("polymfvi {}", env!("CARGO_PKG_VERSION"));
            return Ok(());
        }
        Command::Run { config } => (config, None),
        Command::Approx { config } => (config, Some(Experiment::ApproxRates)),
        Command::Mixtures { config } => (config, Some(Experiment::Mixtures)),
    };
    let cfg = load_config(&path, implied, cli.seed)?;
    let out = cli.out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    log::info!("running {} with seed {} into {}", cfg.experiment.name(), cfg.seed, out.display());
    let line = execute(&cfg, &out)?;
    if !cli.quiet {
        println!("{line}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
