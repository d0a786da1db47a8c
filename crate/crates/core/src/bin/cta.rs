use clap::{Args, Parser, Subcommand};
use cta_core::cli;
use cta_core::config::load_config;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cta",
    about = "Cross-task attention-shift adversarial attack toolkit",
    version
)]
struct CliArgs {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; defaults apply when omitted ({} is valid).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set dataset.n_train=128 (flag wins).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-task dataset.
    Datagen(Common),
    /// Train the classifier, detector and segmenter (plus the frozen extractor).
    TrainModels(Common),
    /// Train one perturbation generator per configured epsilon.
    TrainAttack(Common),
    /// Apply trained generators to images and write adversarial PNGs.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Input images (defaults to the dataset test split).
        #[arg(long, value_name = "PNG")]
        images: Vec<PathBuf>,
    },
    /// Evaluate attacks across all tasks and write the report.
    Eval(Common),
    /// Render clean/co/anti/adversarial attention grids.
    Visualize {
        #[command(flatten)]
        common: Common,
        /// Test-split image ids (defaults to the config's visualize.image_ids).
        #[arg(long, value_delimiter = ',')]
        ids: Vec<usize>,
    },
}

fn run() -> cta_core::Result<()> {
    let args = CliArgs::parse();
    match args.command {
        Command::Datagen(c) => cli::cmd_datagen(&load_config(c.config.as_deref(), &c.set)?),
        Command::TrainModels(c) => cli::cmd_train_models(&load_config(c.config.as_deref(), &c.set)?),
        Command::TrainAttack(c) => cli::cmd_train_attack(&load_config(c.config.as_deref(), &c.set)?),
        Command::Attack { common, images } => {
            cli::cmd_attack(&load_config(common.config.as_deref(), &common.set)?, &images)
        }
        Command::Eval(c) => cli::cmd_eval(&load_config(c.config.as_deref(), &c.set)?),
        Command::Visualize { common, ids } => {
            cli::cmd_visualize(&load_config(common.config.as_deref(), &common.set)?, &ids)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
