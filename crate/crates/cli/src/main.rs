use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ibed_cli::{run, CliError, Command, ExperimentConfig, RunContext};

#[derive(Debug, Parser)]
#[command(name = "ibed", version, about = "Bayesian experimental design for implicit models")]
struct Cli {
    #[command(subcommand)]
    command: Sub,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "IBED_THREADS")]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Train critic and design jointly.
    Train,
    /// Optimise the design by Bayesian optimisation.
    Bo,
    /// Sample the posterior at a trained design.
    Posterior {
        /// Network snapshot (default: <out>/network.json).
        #[arg(long)]
        network: Option<PathBuf>,
        /// Design file (default: <out>/design.csv).
        #[arg(long)]
        design: Option<PathBuf>,
    },
    /// Nested Monte Carlo reference mutual information.
    ReferenceMi {
        #[arg(long)]
        design: Option<PathBuf>,
    },
    /// Score a trained network on fresh validation sets.
    Validate {
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long)]
        design: Option<PathBuf>,
    },
    /// Train and rank candidate network configurations.
    GridSearch,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let mut config = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {n} worker threads: {e}")))?;
    }
    let out = config.output_dir(cli.out.as_deref());
    let (command, network, design) = match cli.command {
        Sub::Train => (Command::Train, None, None),
        Sub::Bo => (Command::Bo, None, None),
        Sub::Posterior { network, design } => (Command::Posterior, network, design),
        Sub::ReferenceMi { design } => (Command::ReferenceMi, None, design),
        Sub::Validate { network, design } => (Command::Validate, network, design),
        Sub::GridSearch => (Command::GridSearch, None, None),
    };
    let ctx = RunContext {
        config,
        out,
        network,
        design,
    };
    let manifest = run(command, &ctx)?;
    for f in &manifest.files {
        println!("{}", ctx.out.join(&f.name).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
