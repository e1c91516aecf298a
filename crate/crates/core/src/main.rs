use std::process::ExitCode;

use clap::Parser;
use lbadmm::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {message}", e.kind());
            ExitCode::FAILURE
        }
    }
}
