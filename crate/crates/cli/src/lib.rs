//! The `magicmix` command line: argument parsing, command execution and
//! error reporting.

pub mod args;
pub mod commands;
pub mod error;

use std::path::PathBuf;

use clap::Parser;
use magicmix_core::par::Execution;

use args::{Cli, Command};
use commands::{execute, replay, Outcome, Resolved};
pub use error::{exit, CliError, CliResult};

fn scratch_dir() -> PathBuf {
    std::env::temp_dir().join(format!("magicmix-scratch-{}", std::process::id()))
}

fn run_resolved(resolved: &Resolved, out: Option<PathBuf>, exec: Execution) -> CliResult<Outcome> {
    match out {
        Some(dir) => execute(resolved, &dir, exec),
        None => {
            let dir = scratch_dir();
            let res = execute(resolved, &dir, exec);
            let _ = std::fs::remove_dir_all(&dir);
            res
        }
    }
}

fn configure_threads(workers: Option<usize>) -> CliResult<()> {
    #[cfg(feature = "parallel")]
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Core(magicmix_core::Error::InvalidConfig(e.to_string())))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
    Ok(())
}

/// Runs a parsed command line and returns its summary.
pub fn run(cli: Cli) -> CliResult<Outcome> {
    configure_threads(cli.workers)?;
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Auto };
    let (resolved, out) = match &cli.command {
        Command::GenData(a) => commands::resolve_gen_data(a).map(|(r, o)| (r, Some(o)))?,
        Command::Train(a) => commands::resolve_train(a).map(|(r, o)| (r, Some(o)))?,
        Command::Sample(a) => commands::resolve_sample(a).map(|(r, o)| (r, Some(o)))?,
        Command::Mix(a) => commands::resolve_mix("mix", a).map(|(r, o)| (r, Some(o)))?,
        Command::MixTt(a) => commands::resolve_mix("mix-tt", a).map(|(r, o)| (r, Some(o)))?,
        Command::Remove(a) => commands::resolve_mix("remove", a).map(|(r, o)| (r, Some(o)))?,
        Command::Sweep(a) => commands::resolve_sweep(a).map(|(r, o)| (r, Some(o)))?,
        Command::Inspect(a) => commands::resolve_inspect(a),
        Command::OracleCheck(a) => commands::resolve_oracle_check(a)?,
        Command::Replay(a) => return replay(&a.manifest, &a.out, exec),
    };
    run_resolved(&resolved, out, exec)
}

/// Parses `args`, runs, prints, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            if code != exit::OK {
                eprintln!(
                    "{}",
                    serde_json::json!({"error": {"category": "usage", "exit_code": code, "message": e.kind().to_string()}})
                );
            }
            return code;
        }
    };
    match run(cli) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string_pretty(&outcome.summary).unwrap_or_default());
            match outcome.failure {
                None => exit::OK,
                Some(e) => {
                    eprintln!("{}", e.to_json());
                    e.exit_code()
                }
            }
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
