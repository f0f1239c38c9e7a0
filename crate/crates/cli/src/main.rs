mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use repper::federation::Method;
use repper::nn::HeadKind;

#[derive(Debug, Parser)]
#[command(
    name = "repper",
    version,
    about = "Personalized federated learning: federated contrastive representation learning plus per-client heads",
    after_long_help = concat!(
        "CONFIGURATION\n\nEvery key is optional. Defaults:\n\n",
        include_str!("template.toml"),
        "\nEXIT CODES\n  0 success\n  2 invalid configuration, input data or checkpoint\n  3 numeric failure during training\n"
    )
)]
struct Cli {
    /// Worker threads for client-parallel training (default: all cores).
    #[arg(long, env = "REPPER_THREADS", global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Partition, train, personalize and evaluate one method for one seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `federation.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `federation.method`.
        #[arg(long)]
        method: Option<Method>,
        /// Overrides `output_dir`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run several methods on identical partitions over every configured seed.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated methods (default: all).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Overrides `seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Train heads for new clients on a frozen encoder checkpoint.
    Adapt {
        /// A crl or pcl checkpoint written by `run`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// One labeled file per new client (.csv, anything else is read as binary).
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long, default_value = "logistic")]
        head: HeadKind,
        /// Head optimizer steps (default: the checkpoint's `adapt_iterations`).
        #[arg(long)]
        iterations: Option<usize>,
        /// Test fraction for files without a split.
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value = "adapt.json")]
        out: PathBuf,
    },
    /// Write unit-normalized encoder embeddings as `label,z0..` CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            method,
            output_dir,
        } => commands::run(&config, seed, method, output_dir),
        Command::Compare {
            config,
            methods,
            seeds,
            output_dir,
        } => commands::compare(&config, &methods, &seeds, output_dir),
        Command::Adapt {
            checkpoint,
            data,
            head,
            iterations,
            test_fraction,
            out,
        } => commands::adapt(&checkpoint, &data, head, iterations, test_fraction, &out),
        Command::ExportEmbeddings {
            checkpoint,
            data,
            out,
        } => commands::export_embeddings(&checkpoint, &data, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
