//! Batch pipeline runner: simulate scenarios, fit the transport model,
//! build exposures, fit outcome models, and estimate effects, with every
//! artifact digested into a run manifest.
//!
//! Exit codes: 0 ok, 1 numeric or convergence failure, 2 input error.

mod commands;
mod manifest;

use clap::{Args, Parser, Subcommand};
use commands::Failure;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "windshed", version, about = "Pipeline runner for windshed analyses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// cap on parallel worker threads (overrides WINDSHED_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args)]
struct CommonArgs {
    /// flat `section.key = value` configuration file
    #[arg(long)]
    config: PathBuf,
    /// output directory (overrides config key `output.dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// master seed (overrides config key `seed`)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the transport parameter posterior from an observed field
    FitTransport {
        #[command(flatten)]
        common: CommonArgs,
        /// keep artifacts and exit 0 even when R-hat exceeds the threshold
        #[arg(long)]
        allow_unconverged: bool,
    },
    /// Turn a transport posterior into source-receptor and exposure tables
    BuildExposure {
        #[command(flatten)]
        common: CommonArgs,
        /// one exposure set at the posterior-mean parameters (the default)
        #[arg(long, conflicts_with = "draws")]
        plugin: bool,
        /// K exposure sets from evenly thinned posterior draws
        #[arg(long, value_name = "K")]
        draws: Option<usize>,
    },
    /// Fit one outcome model to an outcome table
    FitOutcome {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Estimate direct and indirect effects by both plug-in and cut inference
    EstimateEffects {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate synthetic scenario inputs, or run a bundled replication suite
    Simulate {
        /// scenario configuration to realize into pipeline input files
        #[arg(long, conflicts_with = "suite")]
        scenario: Option<PathBuf>,
        /// bundled replication suite name (`default`)
        #[arg(long)]
        suite: Option<String>,
        /// output directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// master seed override
        #[arg(long)]
        seed: Option<u64>,
        /// replicates per scenario (suite mode)
        #[arg(long)]
        replicates: Option<usize>,
        /// exposure imputations per replicate (suite mode)
        #[arg(long)]
        imputations: Option<usize>,
    },
}

fn thread_cap(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| {
        std::env::var("WINDSHED_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = thread_cap(cli.threads) {
        // ignore the error when a pool already exists (tests share a process)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::FitTransport {
            common,
            allow_unconverged,
        } => {
            let ctx = commands::prepare(&common.config, common.out.as_deref(), common.seed)?;
            commands::fit_transport(&ctx, allow_unconverged)
        }
        Command::BuildExposure {
            common,
            plugin: _,
            draws,
        } => {
            let ctx = commands::prepare(&common.config, common.out.as_deref(), common.seed)?;
            commands::build_exposure(&ctx, draws)
        }
        Command::FitOutcome { common } => {
            let ctx = commands::prepare(&common.config, common.out.as_deref(), common.seed)?;
            commands::fit_outcome(&ctx)
        }
        Command::EstimateEffects { common } => {
            let ctx = commands::prepare(&common.config, common.out.as_deref(), common.seed)?;
            commands::estimate_effects(&ctx)
        }
        Command::Simulate {
            scenario,
            suite,
            out,
            seed,
            replicates,
            imputations,
        } => match (scenario, suite) {
            (Some(path), None) => commands::simulate_scenario(&path, out.as_deref(), seed),
            (None, Some(name)) => {
                commands::simulate_suite(&name, out.as_deref(), seed, replicates, imputations)
            }
            (None, None) => Err(Failure::Core(windshed::Error::Argument(
                "simulate needs either --scenario <file> or --suite <name>".into(),
            ))),
            (Some(_), Some(_)) => unreachable!("clap enforces the conflict"),
        },
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(failure) => {
            eprintln!("error: {failure}");
            std::process::exit(failure.exit_code());
        }
    }
}
