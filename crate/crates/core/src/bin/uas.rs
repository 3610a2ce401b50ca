//! Command-line front end.
//!
//! Exit codes: 0 ok, 1 invalid input, 2 runtime failure, 3 verification
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use uas_core::envs::proposition::brute_force_shared_optimum;
use uas_core::harness::{self, plot, Algorithm, ExperimentConfig, Selection, Suite};
use uas_core::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "uas", version, about = "Unified action space multi-agent training harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (algorithm, seed) of a configuration.
    Train {
        config: PathBuf,
        /// Only these algorithms (repeatable).
        #[arg(long = "algorithm")]
        algorithms: Vec<Algorithm>,
        /// Only these seeds (repeatable).
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
    },
    /// Run an oracle suite: gradcheck, proposition, igm, masks or all.
    Verify { suite: String },
    /// Export seed-aggregated learning curves as CSV.
    Plot {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Defaults to `plots/` inside the first run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Best shared unconditioned policy of the proposition game by grid search.
    Bruteforce {
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        a0: usize,
        #[arg(long, default_value_t = 6)]
        a1: usize,
        #[arg(long, default_value_t = 60)]
        resolution: usize,
    },
}

fn code_of(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::Train {
            config,
            algorithms,
            seeds,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let select = Selection {
                algorithms: (!algorithms.is_empty()).then_some(algorithms),
                seeds: (!seeds.is_empty()).then_some(seeds),
            };
            let records = harness::run(&cfg, &select)?;
            print_json(&records)?;
            Ok(if records.iter().all(|r| r.completed()) { 0 } else { EXIT_RUNTIME })
        }
        Command::Eval {
            checkpoint,
            config,
            episodes,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            print_json(&harness::evaluate_checkpoint(&checkpoint, &cfg, episodes)?)?;
            Ok(0)
        }
        Command::Verify { suite } => {
            let suites: Vec<Suite> = if suite == "all" {
                Suite::ALL.to_vec()
            } else {
                vec![suite.parse()?]
            };
            let reports = suites
                .into_iter()
                .map(harness::run_suite)
                .collect::<Result<Vec<_>, _>>()?;
            let passed = reports.iter().all(|r| r.passed);
            if reports.len() == 1 {
                print_json(&reports[0])?;
            } else {
                print_json(&reports)?;
            }
            Ok(if passed { 0 } else { EXIT_VERIFY })
        }
        Command::Plot { run_dirs, out } => {
            let out = out.unwrap_or_else(|| run_dirs[0].join("plots"));
            for p in plot::export(&run_dirs, &out)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::Bruteforce { n, a0, a1, resolution } => {
            print_json(&brute_force_shared_optimum(n, a0, a1, resolution)?)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(code_of(&e))
        }
    }
}
