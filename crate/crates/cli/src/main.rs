use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use varmatch_cli::cli::Cli;
use varmatch_cli::{commands, exit_code, UsageError};

fn threads(flag: Option<usize>) -> Result<Option<usize>, UsageError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("VARMATCH_THREADS") {
        Ok(v) if !v.trim().is_empty() => {
            v.trim().parse().map(Some).map_err(|_| UsageError(format!("VARMATCH_THREADS={v:?} is not a thread count")))
        }
        _ => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = threads(cli.threads).map_err(anyhow::Error::from).and_then(|n| {
        if let Some(n) = n {
            if n == 0 {
                return Err(UsageError("--threads must be at least 1".into()).into());
            }
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        }
        commands::run(&cli)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
