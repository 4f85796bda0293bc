//! `gridlmp` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_CODES: &str = "\
Exit codes:
  0  success (price: relaxation certified exact)
  1  invalid input, failed validation or internal error
  2  price: relaxation inexact, no LMPs emitted
  3  price: instance infeasible";

#[derive(Parser, Debug)]
#[command(name = "gridlmp", version, about = "Nodal prices for hybrid AC/DC grids", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a grid and audit its invariants.
    Validate(Common),
    /// Convert the AC network to the hybrid architecture.
    Upgrade {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        upgrade: UpgradeArgs,
    },
    /// Solve the cone relaxation and certify its prices.
    Price {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pricing: PricingArgs,
    },
    /// Solve the linearized OPF.
    Dcopf(Common),
    /// Price an ensemble of randomly perturbed operating points.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pricing: PricingArgs,
        /// Number of scenarios.
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Find the largest uniform load scale that stays feasible.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Bracket width of the bisection.
        #[arg(long, default_value_t = 0.01)]
        step: f64,
        /// Cap on scale doublings before bisection.
        #[arg(long, default_value_t = 20)]
        max_iter: usize,
        #[arg(long, value_enum, default_value_t = Model::Relaxation)]
        model: Model,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Grid file (MATPOWER case or native JSON).
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Solver tolerance [default: 5e-8 for the cone programs, 1e-10 for dcopf].
    #[arg(long)]
    tol: Option<f64>,
    /// RNG seed for randomized subcommands.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct UpgradeArgs {
    /// Converter loss factor of new DC links.
    #[arg(long, default_value_t = 0.035)]
    loss_factor: f64,
    /// Reactive capability of each converter as a fraction of its active capacity.
    #[arg(long, default_value_t = 0.25)]
    q_cap_fraction: f64,
}

#[derive(Args, Debug, Clone)]
struct PricingArgs {
    /// Threshold on rank ratios and the worst relaxation error.
    #[arg(long, default_value_t = 1e-6)]
    exact_tol: f64,
    /// Subspace-avoidance margin threshold, relative to the largest reduced price.
    #[arg(long, default_value_t = 1e-5)]
    margin_tol: f64,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Matpower,
    Json,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Model {
    Relaxation,
    Linearized,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
