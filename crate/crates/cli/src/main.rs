//! `snlab` — derivative checks, curvature experiments, training runs and
//! learning-rate sweeps, driven by JSON configs.

mod commands;
mod config;

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Both,
}

#[derive(Parser)]
#[command(
    name = "snlab",
    about = "Normalization lab: operator derivative checks, curvature experiments, toy GPT training",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Path to the JSON config for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for reports and checkpoints.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Report formats to write.
    #[arg(long, global = true, value_enum, default_value_t = Format::Both)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Check every analytic operator derivative against finite differences.
    Gradcheck,
    /// Curvature experiments over the normalized-linear operator.
    Curvature {
        #[command(subcommand)]
        which: CurvatureCommand,
    },
    /// Train one model configuration with periodic checkpoints.
    Train,
    /// Train the (scheme, lr, seed) grid and report per-scheme frontiers.
    LrSweep,
}

#[derive(Subcommand)]
enum CurvatureCommand {
    /// Gauss-Newton dominance sweep over dimensions.
    Dominance,
    /// Weight-scale invariance check.
    Scale,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config) = cli.config.as_deref() else {
        eprintln!("--config <path> is required");
        return ExitCode::from(commands::EXIT_USAGE);
    };
    let out = cli.out.as_path();
    let code = match cli.command {
        Command::Gradcheck => commands::cmd_gradcheck(config, out, cli.seed, cli.format),
        Command::Curvature { which } => match which {
            CurvatureCommand::Dominance => {
                commands::cmd_curvature_dominance(config, out, cli.seed, cli.format)
            }
            CurvatureCommand::Scale => {
                commands::cmd_curvature_scale(config, out, cli.seed, cli.format)
            }
        },
        Command::Train => commands::cmd_train(config, out, cli.seed, cli.format),
        Command::LrSweep => commands::cmd_lr_sweep(config, out, cli.seed, cli.format),
    };
    ExitCode::from(code)
}
