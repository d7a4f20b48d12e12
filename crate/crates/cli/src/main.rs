mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use linkgnn::Error;

#[derive(Parser, Debug)]
#[command(
    name = "linkgnn",
    version,
    about = "Link-output GNN resource allocation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config with per-subcommand sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Reduced grid and budgets.
    #[arg(long, global = true)]
    desk_scale: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write training instances and a manifest.
    GenData,
    /// Train a model.
    Train,
    /// Evaluate a trained model.
    Eval,
    /// Delay and inference time of every method across sizes.
    Sweep,
    /// Compare the three training methods on both backbones.
    Bench,
    /// Finite-difference check of every gradient.
    Gradcheck,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Json(_) => 1,
        Error::Numeric(_) => 2,
        Error::Io(_) | Error::Csv(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let run = || -> linkgnn::Result<()> {
        let mut cfg = config::CliConfig::load(cli.config.as_deref())?;
        if let Some(seed) = cli.seed {
            cfg.override_seed(seed);
        }
        let ctx = commands::Context {
            config: cfg,
            out: cli.out.clone(),
            desk_scale: cli.desk_scale,
        };
        match cli.command {
            Command::GenData => commands::gen_data(&ctx),
            Command::Train => commands::train(&ctx),
            Command::Eval => commands::eval(&ctx),
            Command::Sweep => commands::sweep(&ctx),
            Command::Bench => commands::bench(&ctx),
            Command::Gradcheck => commands::gradcheck(&ctx),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
