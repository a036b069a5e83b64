//! Command-line front end for iterative prompt refinement.
//!
//! Every subcommand reads one JSON configuration (see [`config::AppConfig`]),
//! applies flag overrides, and records the effective configuration next to
//! its output so the run can be replayed with `ipr replay`.

pub mod commands;
pub mod config;
pub mod error;
pub mod snapshot;
pub mod verify;

use std::path::PathBuf;

use clap::Parser;

use commands::{execute, Command};
use config::{load_config, AppConfig};
use error::CliError;

pub const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\ncommit: ",
    env!("IPR_GIT_HASH"),
    "\ntarget: ",
    env!("IPR_BUILD_TARGET"),
    "\nprofile: ",
    env!("IPR_BUILD_PROFILE"),
);

#[derive(Debug, Parser)]
#[command(name = "ipr", version, long_version = LONG_VERSION, about = "Iterative prompt refinement for safer text-to-image generation")]
pub struct Cli {
    /// JSON configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

/// Runs a parsed invocation and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32, CliError> {
    if let Command::Replay(args) = cli.command {
        let snap = snapshot::read_snapshot(&args.snapshot)?;
        let mut cmd = snap.invocation;
        if let Some(out) = args.out {
            cmd.set_out(out);
        }
        return execute(cmd, snap.config);
    }
    let cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => AppConfig::default(),
    };
    execute(cli.command, cfg)
}
