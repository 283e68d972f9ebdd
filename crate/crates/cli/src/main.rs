//! `phonosep` command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, bad config file,
//! missing or invalid options), 2 on runtime failures.

mod commands;
mod options;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use options::Options;

/// Separate singing voice from accompaniment with phoneme-conditioned U-Nets.
#[derive(Parser, Debug)]
#[command(name = "phonosep", version, about, propagate_version = true)]
pub struct Cli {
    /// TOML file of option values, keyed by flag name without the dashes
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(flatten)]
    options: Options,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Generate a synthetic annotated corpus (--out, song counts, --duration)
    SynthData,
    /// Merge per-instrument tracks into vocal and accompaniment stems (--tracks, --profiles, --nu, --out)
    BuildSources,
    /// Partition a manifest by annotation agreement (--manifest, --out)
    Split,
    /// Train a model on a split manifest (--manifest, --variant, --preset, --out)
    Train,
    /// Separate one mixture (--mixture, --model or --mask-override, --annotations, --out)
    Separate,
    /// Score a model or precomputed estimates on the test split (--manifest, --model | --estimates)
    Evaluate,
    /// Print parameter counts for every variant, or for one --model / --variant
    CountParams,
    /// Check analytic gradients of every op and the conditioned network (--seeds, --precision)
    GradCheck,
}

/// An error caused by how the program was invoked rather than by the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn configure_jobs(jobs: Option<usize>) -> anyhow::Result<()> {
    match jobs {
        None => {}
        Some(0) => return Err(UsageError("--jobs must be at least 1".into()).into()),
        Some(1) => phonosep::parallel::set_sequential(true),
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let options = match &cli.config {
        Some(path) => cli.options.overlay(Options::from_file(path)?),
        None => cli.options,
    };
    configure_jobs(options.jobs)?;
    commands::dispatch(cli.command, &options)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
