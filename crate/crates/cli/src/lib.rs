//! Command-line front end of `mnar-ssl`.
//!
//! ```text
//! mnar-ssl <generate|estimate|train|test-mcar|study> --config run.toml --seed 7 --out results/
//! ```
//!
//! Exit status: 0 on success, 1 on a validation, configuration or I/O
//! error, 2 when an optimizer diverged. Log verbosity follows the
//! `MNAR_SSL_LOG` environment variable (`error`, `warn`, `info`, `debug`).

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

pub const LOG_ENV: &str = "MNAR_SSL_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "mnar-ssl",
    version,
    about = "Semi-supervised learning with informative missing labels"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Run seed; overrides `seed` in the config (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if needed.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic dataset, mask its labels and write the sealed truth.
    Generate(Common),
    /// Estimate the missing-data mechanism of a dataset.
    Estimate(Common),
    /// Train a classifier on the debiased or classical SSL risk.
    Train(Common),
    /// Likelihood-ratio test of MCAR labels.
    TestMcar(Common),
    /// Replicate generate + a pipeline over consecutive seeds.
    Study(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate(c)
            | Command::Estimate(c)
            | Command::Train(c)
            | Command::TestMcar(c)
            | Command::Study(c) => c,
        }
    }
}

/// Runs a parsed command and returns the files it wrote.
pub fn execute(command: &Command) -> Result<Vec<PathBuf>, CliError> {
    let common = command.common();
    let config = RunConfig::load(&common.config)?;
    config.validate()?;
    let seed = common.seed.or(config.seed).unwrap_or(0);
    let out = &common.out;
    match command {
        Command::Generate(_) => commands::cmd_generate(&config, seed, out),
        Command::Estimate(_) => commands::cmd_estimate(&config, seed, out),
        Command::Train(_) => commands::cmd_train(&config, seed, out),
        Command::TestMcar(_) => {
            let (files, summary) = commands::cmd_test_mcar(&config, seed, out)?;
            println!("{summary}");
            Ok(files)
        }
        Command::Study(_) => commands::cmd_study(&config, seed, out),
    }
}

/// Parses arguments, runs, reports errors, and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(files) => {
            for f in files {
                log::info!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Core(mnar_ssl::Error::Diverged { trace, .. }) = &e {
                eprintln!("objective trace: {trace:?}");
            }
            e.exit_code()
        }
    }
}
