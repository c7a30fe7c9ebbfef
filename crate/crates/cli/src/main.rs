//! `phnn`: dataset generation, training, evaluation and subsystem transfer
//! for port-Hamiltonian neural network identification experiments.

mod commands;
mod config;
mod error;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::Overrides;
use error::CliError;
use phnn::protocol::Profile;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "phnn", version, about = "Port-Hamiltonian subsystem identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Smoke,
    Full,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Worker threads for gradient evaluation (1 is bitwise reproducible).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the datasets and a manifest listing their roles.
    Generate(Common),
    /// Train on the datasets of a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/manifest.toml`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Simulate a dataset with an archived model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Couple a learned subsystem to the gas reservoir and compare with the true plant.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/model.json`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Generate, train, evaluate on the test sets and run the transfer experiment.
    ReproducePaper(Common),
}

fn load(c: &Common) -> Result<config::ExperimentConfig, CliError> {
    let ov = Overrides {
        seed: c.seed,
        profile: c.profile.map(|p| match p {
            ProfileArg::Smoke => Profile::Smoke,
            ProfileArg::Full => Profile::Full,
        }),
        out: c.out.clone(),
        threads: c.threads,
    };
    config::load(c.config.as_deref(), &ov)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = load(&c)?;
            let m = commands::generate(&cfg)?;
            println!("{}", m.display());
        }
        Command::Train { common, manifest } => {
            let cfg = load(&common)?;
            let manifest = manifest.unwrap_or_else(|| commands::out_dir(&cfg).join(commands::MANIFEST));
            commands::train(&cfg, &manifest)?;
            println!("{}", commands::out_dir(&cfg).join(commands::MODEL).display());
        }
        Command::Eval { model, data, out } => {
            let archive = phnn::io::load_model(&model)?;
            commands::eval(&archive, &data, &out)?;
        }
        Command::Transfer { common, model } => {
            let cfg = load(&common)?;
            let out = commands::out_dir(&cfg);
            let path = model.unwrap_or_else(|| out.join(commands::MODEL));
            let archive = phnn::io::load_model(&path)?;
            commands::transfer(&cfg, &archive, &out)?;
        }
        Command::ReproducePaper(c) => {
            let cfg = load(&c)?;
            commands::reproduce(&cfg)?;
            println!("{}", commands::out_dir(&cfg).join("summary.txt").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
