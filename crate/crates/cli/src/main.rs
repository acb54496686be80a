use std::process::ExitCode;

use clap::{Parser, Subcommand};

use geoflow_cli::commands::{self, Outcome};
use geoflow_cli::config::{self, CommandKind, Overrides};

/// Geodesic flows on warped-product surfaces: averaged curvature, Green bundles, hyperbolicity checks.
#[derive(Debug, Parser)]
#[command(name = "geoflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the structural conditions on the warping function.
    Validate,
    /// Integrate one geodesic and its curvature average.
    Simulate,
    /// Sample geodesics and evaluate the averaged-curvature criterion.
    Scan,
    /// Green bundles, angle, contraction and determinant checks at a base point.
    Green,
    /// Theoretical lower bound on long-time averages.
    Floor,
    /// Summarize the artifacts already in the output directory.
    Report,
}

impl Command {
    fn kind(&self) -> CommandKind {
        match self {
            Self::Validate => CommandKind::Validate,
            Self::Simulate => CommandKind::Simulate,
            Self::Scan => CommandKind::Scan,
            Self::Green => CommandKind::Green,
            Self::Floor => CommandKind::Floor,
            Self::Report => CommandKind::Report,
        }
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, which is reserved for negative verdicts.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = config::resolve(cli.command.kind(), &cli.overrides).and_then(|cfg| commands::run(&cfg));
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Negative) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
