//! `extremal`: extremal perturbation attribution from the command line.
//!
//! Exit codes: 0 success, 1 failed self-test, 2 bad input, 3 numerical abort.

mod args;
mod run;

use std::process::ExitCode;

use clap::Parser;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<run::ChecksFailed>().is_some() {
        return 1;
    }
    match err.downcast_ref::<extremal::Error>() {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

/// The error chain, leaving out causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in err.chain() {
        let part = cause.to_string();
        if !text.ends_with(&part) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&part);
        }
    }
    text
}

fn main() -> ExitCode {
    let cli = args::Cli::parse();
    if let Some(n) = std::env::var("EXTREMAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        // a pool that is already built keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run::execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
