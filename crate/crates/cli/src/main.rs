//! `treeflow` command-line runner.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::EvalArgs;
use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(
    name = "treeflow",
    version,
    about = "Tree-based conditional normalizing flows for probabilistic regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write it with metrics and the split manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. `--set model.n_epochs=10`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Recompute the NLLs of a trained run from its split manifest.
    Eval {
        /// Model file, or the run directory of a k-fold run.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// CSV data file; the model's schema is used to read it.
        #[arg(long, conflicts_with = "config")]
        data: Option<PathBuf>,
        /// Run config whose data section supplies the rows.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE", requires = "config")]
        overrides: Vec<String>,
        /// Write the metrics JSON here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Draw samples of the target for each row of a feature CSV.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate the density on a regular grid for one feature row.
    Pdf {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Zero-based row of the input to condition on.
        #[arg(long, default_value_t = 0)]
        row: usize,
        /// One `lo:hi:n` axis per target, in target order.
        #[arg(long = "grid", value_name = "LO:HI:N", required = true)]
        grid: Vec<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the synthetic benchmark against the Gaussian gradient-boosting baseline.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            commands::train(&RunConfig::load(&config, &overrides)?)
        }
        Command::Eval {
            model,
            manifest,
            data,
            config,
            overrides,
            output,
        } => {
            let cfg = config
                .map(|p| RunConfig::load(&p, &overrides))
                .transpose()?;
            commands::eval(&EvalArgs {
                model: &model,
                manifest: &manifest,
                data: data.as_deref(),
                config: cfg.as_ref(),
                output: output.as_deref(),
            })
        }
        Command::Sample {
            model,
            input,
            n,
            seed,
            output,
        } => commands::sample(&model, &input, n, seed, output.as_deref()),
        Command::Pdf {
            model,
            input,
            row,
            grid,
            output,
        } => {
            let axes = grid
                .iter()
                .map(|g| commands::parse_axis(g))
                .collect::<CliResult<Vec<_>>>()?;
            commands::pdf(&model, &input, row, &axes, output.as_deref())
        }
        Command::Synth { config, overrides } => {
            commands::synth(&RunConfig::load(&config, &overrides)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            eprintln!("config error: {first}");
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
