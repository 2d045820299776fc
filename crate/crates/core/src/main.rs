use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metastab::experiments::{run, ExperimentConfig, ExperimentKind, Outputs};

#[derive(Parser)]
#[command(
    name = "metastab",
    version,
    about = "Quasi-potentials, certificates and exit-time experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Io {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Point- and boundary-source potentials, m0 and the path-optimizer comparison.
    Quasipotential(Io),
    /// Time-dependent solves with probe series.
    Parabolic(Io),
    /// Stationary solves over the eps list.
    Stationary(Io),
    /// Exit-time simulation and slope fit.
    Montecarlo(Io),
    /// Builds and verifies the certificate suite.
    Certify(Io),
    /// Long-time regime experiment.
    Regimes(Io),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let (kind, io) = match cli.command {
        Command::Quasipotential(io) => (ExperimentKind::Quasipotential, io),
        Command::Parabolic(io) => (ExperimentKind::Parabolic, io),
        Command::Stationary(io) => (ExperimentKind::Stationary, io),
        Command::Montecarlo(io) => (ExperimentKind::Montecarlo, io),
        Command::Certify(io) => (ExperimentKind::Certify, io),
        Command::Regimes(io) => (ExperimentKind::Regimes, io),
    };
    let result = ExperimentConfig::read(&io.config).and_then(|cfg| {
        let out = Outputs::create(&io.out)?;
        run(kind, &cfg, Some(&out))
    });
    match result {
        Ok(report) => {
            for c in report.failed_checks() {
                eprintln!("FAIL {}: {} {} {}", c.name, c.value, c.relation, c.bound);
            }
            for f in &report.failures {
                eprintln!("FAIL {}: {}", f.name, f.message);
            }
            println!(
                "{} {}: {} checks, {} skipped, report in {}",
                kind.name(),
                if report.passed { "passed" } else { "failed" },
                report.checks.len(),
                report.skipped.len(),
                io.out.join("report.json").display()
            );
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
