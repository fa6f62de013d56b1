//! Command line front end: model validation, belief-state solves,
//! equilibrium search, finite-population simulation, the acceptance suite,
//! and exact small-instance oracles.
//!
//! Exit codes: 0 success, 1 domain violation or failed check, 2 input
//! error, 3 resource limit.

mod commands;
mod out;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pomfg_core::error::Error;

#[derive(Parser)]
#[command(
    name = "pomfg",
    version,
    about = "Solver and finite-population verifier for partially observed anonymous mean-field games"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model file and list every violation.
    Validate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Solve the belief-state planning problem against a fixed population flow.
    Solve {
        #[arg(long)]
        model: PathBuf,
        /// Flow CSV path, or "recursive-from-initial" to roll the initial
        /// measure forward under uniformly mixed actions.
        #[arg(long, default_value = "recursive-from-initial")]
        flow: String,
        #[arg(long)]
        horizon: usize,
        /// Terminal value at the horizon: "zero" or "tail-upper".
        #[arg(long, default_value = "zero")]
        terminal: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search for a population flow consistent with its own best response.
    Equilibrium {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        horizon: usize,
        /// Stop once the flow gap falls to this.
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// "constant:<step>" with step in (0, 1], or "fictitious-play".
        #[arg(long, default_value = "constant:1")]
        damping: String,
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo check of an equilibrium against finite populations.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        horizon: usize,
        /// Population sizes, comma separated.
        #[arg(long = "N", value_delimiter = ',', default_value = "5,25,125")]
        n_agents: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// "default", or a comma list drawn from: best-response,
        /// best-response-up, best-response-down, myopic-greedy,
        /// uniform-random.
        #[arg(long, default_value = "default")]
        deviations: String,
        /// Worker threads (0 lets the runtime pick); also settable via
        /// POMFG_THREADS. Affects speed only, never results.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full acceptance suite and write its artifacts.
    Verify {
        #[arg(long, default_value_t = pomfg_core::acceptance::DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact small-instance oracles on a bundled two-state model.
    Oracle {
        /// Run only the path-enumeration filter oracle.
        #[arg(long)]
        filter: bool,
        /// Run only the exhaustive-policy solve oracle.
        #[arg(long)]
        solve: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Invalid(_)
        | Error::MeanFieldObservation
        | Error::ZeroProbabilityBranch { .. }
        | Error::PolicyMissingNode { .. }
        | Error::Internal(_) => 1,
        Error::NodeBudget { .. } => 3,
        _ => 2,
    }
}

fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| std::env::var("POMFG_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0)
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Validate { model } => commands::cmd_validate(&model),
        Command::Solve { model, flow, horizon, terminal, out } => {
            commands::cmd_solve(&commands::SolveArgs {
                model: &model,
                flow: &flow,
                horizon,
                terminal: &terminal,
                out: &out,
            })
        }
        Command::Equilibrium { model, horizon, tol, damping, max_iters, out } => {
            commands::cmd_equilibrium(&commands::EquilibriumArgs {
                model: &model,
                horizon,
                tol,
                damping: &damping,
                max_iters,
                out: &out,
            })
        }
        Command::Simulate { model, horizon, n_agents, reps, seed, deviations, threads, out } => {
            commands::cmd_simulate(&commands::SimulateArgs {
                model: &model,
                horizon,
                n_list: &n_agents,
                reps,
                seed,
                deviations: &deviations,
                threads: resolve_threads(threads),
                out: &out,
            })
        }
        Command::Verify { seed, out } => commands::cmd_verify(seed, &out),
        Command::Oracle { filter, solve, out } => {
            commands::cmd_oracle(filter, solve, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
