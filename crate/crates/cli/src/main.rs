//! `hamavg`: runs one pipeline of the hamavg library from a TOML config and
//! writes its outputs next to a JSON manifest.
//!
//! Exit codes: 0 on success, 1 on configuration or runtime errors, 2 when
//! `check` or `study` returns a failing verdict.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Orbit graph as JSON.
    Graph,
    /// Averaged coefficient tables per edge.
    Coeffs,
    /// Identity checks (integration by parts, flux, derivative lemma, mass).
    Check,
    /// Planar fast-slow SDE ensemble projected onto the graph.
    Sim2d,
    /// Limiting diffusion on the graph.
    Simgraph,
    /// Averaging convergence study across alphas.
    Study,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Graph => "graph",
            Command::Coeffs => "coeffs",
            Command::Check => "check",
            Command::Sim2d => "sim2d",
            Command::Simgraph => "simgraph",
            Command::Study => "study",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hamavg", version, about = "Stochastic averaging on orbit graphs of planar Hamiltonians")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory; overrides HAMAVG_OUT_DIR and [output].dir.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config override as section.key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run::execute(&cli) {
        Ok(run::Status::Success) => ExitCode::SUCCESS,
        Ok(run::Status::Failed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
