use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use finreduce::cli::{self, CliOverrides, RunConfig};

/// Finds stationary paths and fields by exact finite-dimensional reduction and
/// certifies their Morse index.
///
/// Log verbosity is read from FINREDUCE_LOG (error, warn, info, debug, trace).
#[derive(Parser, Debug)]
#[command(name = "finreduce", version, about, long_about)]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Number of multistart seeds; overrides `multistart.count`.
    #[arg(long, global = true, value_name = "K")]
    seeds: Option<usize>,

    /// Pseudorandom seed in hexadecimal; overrides `multistart.seed`.
    #[arg(long, global = true, value_name = "HEX")]
    seed: Option<String>,

    /// Tail solver.
    #[arg(long, global = true, value_parser = ["picard", "newton"])]
    method: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the cutoff, monotonicity constant and truncation.
    Plan,
    /// Solve and write solutions.csv, per-solution samples and coefficients,
    /// convergence.log and resolved_config.toml. Exit 0 with at least one
    /// solution, 2 with none, 1 on error.
    Solve,
    /// Recompute the index of a saved solution three ways; exit 3 on disagreement.
    Index {
        /// Solution id from solutions.csv.
        #[arg(long, default_value_t = 1)]
        id: usize,
    },
    /// Compare eigenvalue counts with the Weyl asymptotic for `weyl.c_values`.
    Weyl,
}

fn run(args: Args) -> finreduce::Result<u8> {
    let path = args
        .config
        .ok_or_else(|| finreduce::Error::Config("--config PATH is required".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    cli::apply_overrides(
        &mut cfg,
        &CliOverrides {
            out: args.out,
            seeds: args.seeds,
            seed: args.seed,
            method: args.method,
        },
    )?;
    match args.command {
        Command::Plan => {
            print!("{}", cli::cmd_plan(&cfg)?);
            Ok(0)
        }
        Command::Solve => {
            let s = cli::cmd_solve(&cfg)?;
            println!(
                "{} solution(s) from {} seeds ({} converged), written to {}",
                s.solutions,
                s.seeds,
                s.converged_seeds,
                s.out_dir.display()
            );
            Ok(s.exit_code() as u8)
        }
        Command::Index { id } => {
            let outcome = cli::cmd_index(&cfg, id)?;
            print!("{}", outcome.render());
            Ok(if outcome.agree() { 0 } else { 3 })
        }
        Command::Weyl => {
            print!("{}", cli::cmd_weyl(&cfg)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FINREDUCE_LOG", "warn")).init();
    match run(Args::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
