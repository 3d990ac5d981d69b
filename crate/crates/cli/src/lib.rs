//! Command-line front end: cohort synthesis, receptive-field arithmetic,
//! training, evaluation, ablations and reporting, all driven by one TOML
//! run configuration.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "biaxial", version, about = "Two-stage attention transformer for multichannel signals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (TOML).
    pub config: PathBuf,
    /// Override the model, training and evaluation seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            cohort_seed: None,
            output_dir: self.out.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic cohort and its manifest.
    Synth {
        /// Run configuration (TOML).
        config: PathBuf,
        /// Override the cohort seed.
        #[arg(long)]
        cohort_seed: Option<u64>,
        /// Write the cohort here instead of next to the configured manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print output length, jump and receptive field of a conv stack.
    RfCalc {
        /// Stack file (TOML with kernels, strides, optional paddings,
        /// input_len and fs).
        stack: PathBuf,
    },
    /// Train one model per held-out group and evaluate it.
    Train(RunArgs),
    /// Re-evaluate trained checkpoints.
    Eval(RunArgs),
    /// Run one ablation arm.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Which arm to run.
        #[arg(value_enum)]
        arm: ablate::Arm,
    },
    /// Render the tables of a results directory.
    Report {
        /// Results directory containing metrics.jsonl.
        dir: PathBuf,
    },
}

/// Executes a parsed command and returns what it prints.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Synth { config, cohort_seed, out } => commands::synth(
            config,
            &Overrides {
                seed: None,
                cohort_seed: *cohort_seed,
                output_dir: out.clone(),
            },
        ),
        Command::RfCalc { stack } => commands::rf_calc(stack),
        Command::Train(a) => commands::train(&a.config, &a.overrides()),
        Command::Eval(a) => commands::eval(&a.config, &a.overrides()),
        Command::Ablate { run, arm } => ablate::ablate(&run.config, *arm, &run.overrides()),
        Command::Report { dir } => commands::report(dir),
    }
}
