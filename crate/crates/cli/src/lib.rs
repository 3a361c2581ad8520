//! Command-line driver for the `tempres` toolkit: registration, resolution,
//! overlays, the sharp-edge model check and a synthetic 3D phantom.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod phantom;

pub use cli::{Cli, Command};
pub use commands::Report;
pub use config::ConfigFile;
pub use error::{exit, CliError, Result};
pub use manifest::RunManifest;

/// Runs one parsed invocation inside a pool of at most `--threads` workers.
pub fn execute(cli: &Cli) -> Result<Report> {
    let config = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Register(a) => commands::cmd_register(a, &config).map(|o| o.report),
        Command::Resolve(a) => commands::cmd_resolve(a, &config).map(|o| o.report),
        Command::Visualize(a) => commands::cmd_visualize(a, &config),
        Command::ModelCheck(a) => commands::cmd_model_check(a, &config).map(|o| o.report),
        Command::Synth3d(a) => commands::cmd_synth3d(a, &config),
    })
}

/// Exit code for a finished run.
pub fn exit_code(outcome: &Result<Report>) -> i32 {
    match outcome {
        Ok(r) if r.capped > 0 => exit::CAPPED,
        Ok(_) => exit::OK,
        Err(e) => e.exit_code(),
    }
}
