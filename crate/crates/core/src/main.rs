use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tdks::config::{load_config, RunConfig};
use tdks::run::{execute, format_report, write_artifacts, Command};

#[derive(Parser)]
#[command(name = "tdks", version, about = "Time-dependent Kohn-Sham solver, adjoint and estimate checks")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.directory`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// RNG seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Forward solve: diagnostics, trajectory and density snapshots.
    Simulate,
    /// Forward then adjoint solve.
    Adjoint,
    /// Run every estimate check and write the report.
    Verify,
    /// Galerkin refinement study.
    Converge,
    /// Gradient descent on the control objective.
    Optimize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Sub::Simulate => Command::Simulate,
        Sub::Adjoint => Command::Adjoint,
        Sub::Verify => Command::Verify,
        Sub::Converge => Command::Converge,
        Sub::Optimize => Command::Optimize,
    };
    let mut config = match &cli.config {
        Some(path) => match load_config(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output.directory = out.clone();
    }
    let artifacts = match execute(command, &config) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = write_artifacts(&config.output.directory, &artifacts) {
        eprintln!("error: writing {}: {e}", config.output.directory.display());
        return ExitCode::from(2);
    }
    if !cli.quiet {
        for r in &artifacts.reports {
            println!("{}", format_report(r));
        }
        println!("wrote {}", config.output.directory.display());
    }
    if artifacts.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
