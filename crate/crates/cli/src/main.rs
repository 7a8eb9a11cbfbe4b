use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sums_cli::commands::{self, FitArgs, SimulateArgs, SummarizeArgs};
use sums_core::posterior::DensityMethod;

#[derive(Parser)]
#[command(name = "sums", version, about = "Jointly modelled multi-state processes for panel data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Kde,
    Normal,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known truth.
    Simulate {
        #[arg(long, default_value = "sm4")]
        preset: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_subjects: Option<usize>,
        /// Fraction of first states to mask in every process.
        #[arg(long)]
        missing_rate: Option<f64>,
    },
    /// Run the sampler and write one samples file per chain.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        chains: usize,
    },
    /// Summarise the saved iterations of a fit.
    Summarize {
        /// Output directory of `fit`.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Kde)]
        bf_method: Method,
        /// Re-estimate cluster baseline rates on this data with the Binder
        /// partition held fixed.
        #[arg(long)]
        rerun: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { preset, seed, out, n_subjects, missing_rate } => commands::simulate(&SimulateArgs {
            preset,
            seed,
            out,
            n_subjects,
            missing_rate,
        }),
        Command::Fit { data, config, out, chains } => commands::fit(&FitArgs { data, config, out, chains }).map(drop),
        Command::Summarize { samples, out, bf_method, rerun } => commands::summarize(&SummarizeArgs {
            samples,
            out,
            method: match bf_method {
                Method::Kde => DensityMethod::Kde,
                Method::Normal => DensityMethod::Normal,
            },
            rerun,
        })
        .map(drop),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
