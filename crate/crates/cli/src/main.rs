//! `dsol`: tensor analysis, diffuse derivatives, D-solution checks and degenerate solvers
//! from the command line.
//!
//! Exit status: 0 when every declared check passes, 1 when a check fails, 2 for invalid
//! input, 3 for internal errors.

mod commands;
mod error;
mod manifest;
mod output;

use clap::{Parser, Subcommand};
use error::CliError;
use manifest::Manifest;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "dsol", version, about = "D-solutions of fully nonlinear systems: checks and solvers")]
struct Cli {
    /// TOML manifest; flags override its fields.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for randomized schedules, samples and batteries.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a decomposition and report its subspaces and ellipticity constant.
    AnalyzeTensor(commands::AnalyzeTensor),
    /// Diffuse derivative of a grid function as a field of atomic measures.
    Diffuse(commands::Diffuse),
    /// Test whether a grid function is a D-solution.
    Check(commands::Check),
    /// Solve the degenerate linear system by eps-regularisation.
    SolveLinear(commands::SolveLinear),
    /// Solve the fully nonlinear system by the fixed-point iteration.
    SolveNonlinear(commands::SolveNonlinear),
    /// Export an explicit reference case.
    Reference(commands::Reference),
    /// Test the hessian estimate on a function or a seeded battery.
    VerifyEstimate(commands::VerifyEstimate),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::AnalyzeTensor(_) => "analyze-tensor",
            Command::Diffuse(_) => "diffuse",
            Command::Check(_) => "check",
            Command::SolveLinear(_) => "solve-linear",
            Command::SolveNonlinear(_) => "solve-nonlinear",
            Command::Reference(_) => "reference",
            Command::VerifyEstimate(_) => "verify-estimate",
        }
    }

    /// Subcommand with no flags set, for manifests that name the command.
    fn named(name: &str) -> Result<Self, CliError> {
        Ok(match name {
            "analyze-tensor" => Command::AnalyzeTensor(Default::default()),
            "diffuse" => Command::Diffuse(Default::default()),
            "check" => Command::Check(Default::default()),
            "solve-linear" => Command::SolveLinear(Default::default()),
            "solve-nonlinear" => Command::SolveNonlinear(Default::default()),
            "reference" => Command::Reference(Default::default()),
            "verify-estimate" => Command::VerifyEstimate(Default::default()),
            other => return Err(CliError::Parse(format!("unknown command `{other}`"))),
        })
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let manifest = match &cli.manifest {
        Some(p) => Manifest::load(p)?,
        None => Manifest::default(),
    };
    let command = match (cli.command, &manifest.command) {
        (Some(c), Some(m)) if c.name() != m => {
            return Err(CliError::Parse(format!("manifest is for `{m}` but `{}` was requested", c.name())))
        }
        (Some(c), _) => c,
        (None, Some(m)) => Command::named(m)?,
        (None, None) => return Err(CliError::Parse("no subcommand given and the manifest names none".into())),
    };
    let seed = cli.seed.or(manifest.seed).unwrap_or(0);
    let out = cli.out.or(manifest.out.clone()).unwrap_or_else(|| PathBuf::from("dsol-out"));
    let name = command.name();
    match command {
        Command::AnalyzeTensor(p) => commands::analyze_tensor(manifest.merge(name, &p)?, out, seed),
        Command::Diffuse(p) => commands::diffuse(manifest.merge(name, &p)?, out, seed),
        Command::Check(p) => commands::check(manifest.merge(name, &p)?, out, seed),
        Command::SolveLinear(p) => commands::solve_linear(manifest.merge(name, &p)?, out, seed),
        Command::SolveNonlinear(p) => commands::solve_nonlinear(manifest.merge(name, &p)?, out, seed),
        Command::Reference(p) => commands::reference(manifest.merge(name, &p)?, out, seed),
        Command::VerifyEstimate(p) => commands::verify_estimate(manifest.merge(name, &p)?, out, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dsol: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
