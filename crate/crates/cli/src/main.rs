//! `featroute` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use serde::{Deserialize, Serialize};

use commands::Command;

#[derive(Debug, Parser)]
#[command(name = "featroute", version, about = "Class-wise feature routes: attribute, disassemble, assemble")]
struct Cli {
    /// Seed for every random choice (batch order, initialization).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Replay a recorded run configuration instead of a subcommand.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

/// Everything needed to reproduce one invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub command: Command,
}

/// Bad invocation: wrong flags, missing inputs. Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn resolve(cli: Cli) -> anyhow::Result<RunConfig> {
    match (cli.config, cli.command) {
        (Some(_), Some(_)) => Err(UsageError("--config cannot be combined with a subcommand".into()).into()),
        (None, None) => Err(UsageError("missing subcommand (see --help)".into()).into()),
        (None, Some(command)) => Ok(RunConfig {
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cli.seed,
            threads: cli.threads,
            command,
        }),
        (Some(path), None) => {
            commands::require_file(&path)?;
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("{} is not a run configuration", path.display()))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    commands::execute(&cfg)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(featroute::Error::Io { source, .. }) = cause.downcast_ref::<featroute::Error>() {
            if source.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = e.print();
            } else {
                let msg = e.kind().to_string();
                let detail = e.to_string();
                let first = detail
                    .lines()
                    .find(|l| !l.trim().is_empty())
                    .unwrap_or(&msg)
                    .trim_start_matches("error: ");
                eprintln!("featroute: usage error: {first}");
            }
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == 2 { "usage error" } else { "error" };
            eprintln!("featroute: {kind}: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(code)
        }
    }
}
