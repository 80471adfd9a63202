//! `rotvae`: train rotation-robust VAEs on MNIST and reproduce the
//! associated latent-space artifacts.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 data/input
//! error, 4 numerical abort. Messages go to standard error.

mod commands;
mod fileconfig;
mod repro;

use clap::{Parser, Subcommand};

use commands::{cmd_census, cmd_embed, cmd_grid, cmd_train, cmd_tsne};
use fileconfig::AppError;
use repro::cmd_repro;

#[derive(Parser)]
#[command(
    name = "rotvae",
    version,
    about = "Targeted-output VAEs on rotated MNIST: training, latent maps, and figure pipelines",
    after_help = "Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical abort.\n\
                  The data directory resolves from --data, the config file, $ROTVAE_DATA,\n\
                  a checkpoint's recorded path, then ./data/mnist."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt, losses.csv and config.resolved.
    Train(commands::TrainArgs),
    /// Embed a dataset into latent space as a CSV of labelled points.
    Embed(commands::EmbedArgs),
    /// Decode a 2-D latent grid into a PGM mosaic.
    Grid(commands::GridArgs),
    /// Reduce a latent CSV to 2-D with exact t-SNE.
    Tsne(commands::TsneArgs),
    /// Count labels inside a cube around a digit's reference embedding.
    Census(commands::CensusArgs),
    /// Rebuild all artifacts for one figure (1, 2, 4..11).
    Repro(repro::ReproArgs),
}

fn run(cli: &Cli) -> Result<(), AppError> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Grid(args) => cmd_grid(args),
        Command::Tsne(args) => cmd_tsne(args),
        Command::Census(args) => cmd_census(args),
        Command::Repro(args) => cmd_repro(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
